import numpy as np
import pytest

from conftest import random_arch, random_params, smoke_config
from oracles import fd_grad, rel_error
from resbuilder.arch import ResBlock, flops, init_params, new_minimal
from resbuilder.data import Dataset
from resbuilder.layerlasso import lasso_penalty
from resbuilder.morphnet import morph_penalty
from resbuilder.pipeline import (HistoryRecord, RunHistory, TrainConfig, TrainingVariant, accuracy, collapsed,
                                 l2_penalty, regularization_sweep, removal_position_stats, run_resbuilder,
                                 select_best, total_loss, train_phase, variant_lambdas)
from resbuilder.serialize import load_architecture


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lambda_m, c.lambda_lasso, c.lambda_l2, c.tau_lasso, c.zeta, c.n_lambda, c.n_m) == (
        1e-7, 1e-8, 1e-5, 1e-3, 1e8, 4, 7)
    for bad in ({"lambda_m": -1.0}, {"zeta": 0.0}, {"n_m": 0}, {"noreg_schedule": "sometimes"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_variant_parsing_and_lambdas():
    assert TrainingVariant.parse("noregwi") is TrainingVariant.NOREG_WI
    with pytest.raises(ValueError):
        TrainingVariant.parse("NoReg")
    c = TrainConfig()
    assert variant_lambdas(TrainingVariant.WITH_REG, c) == {"lambda_m": 1e-7, "lambda_lasso": 1e-8, "lambda_l2": 1e-5}
    assert variant_lambdas(TrainingVariant.NOREG_RI, c) == {"lambda_m": 0.0, "lambda_lasso": 0.0, "lambda_l2": 1e-5}


def test_zero_lambdas_leave_cross_entropy(rng):
    a = random_arch(rng)
    p = random_params(a, rng)
    x, y = rng.normal(size=(6, 8, 8, 1)), rng.integers(0, 3, 6)
    loss, ce = total_loss(a, p, x, y, p.leaves())
    assert loss.item() == ce.item()


def test_composite_gradient(rng):
    a = random_arch(rng, max_blocks=3, size=6)
    p = random_params(a, rng)
    x, y = rng.normal(size=(4, 6, 6, 1)), rng.integers(0, 3, 4)
    lam = dict(lambda_m=1e-4, lambda_lasso=1e-2, lambda_l2=1e-2)

    def grads(fn):
        tensors = p.leaves()
        fn(tensors).backward()
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    g_total = grads(lambda t: total_loss(a, p, x, y, t, mode="infer", **lam)[0])
    g_ce = grads(lambda t: total_loss(a, p, x, y, t, mode="infer")[0])
    g_lasso = grads(lambda t: lasso_penalty(a, p, t))
    g_morph = grads(lambda t: morph_penalty(a, p, 1e-2, t))
    g_l2 = grads(lambda t: l2_penalty(p, t))
    for k in g_total:
        combined = g_ce[k] + 1e-2 * g_lasso[k] + 1e-4 * g_morph[k] + 1e-2 * g_l2[k]
        np.testing.assert_allclose(g_total[k], combined, rtol=1e-10, atol=1e-14)
    for layer, name in [(a.blocks[0].id + ".conv1", "kernel"), ("stem", "bn_gamma"), ("head", "kernel")] \
            if a.blocks else [("stem", "kernel"), ("stem", "bn_gamma")]:
        arr = getattr(p[layer], name)
        num = fd_grad(lambda: total_loss(a, p, x, y, p.leaves(), mode="infer", **lam)[0].item(), arr, eps=1e-6)
        assert rel_error(g_total[(layer, name)], num) <= 1e-5


def test_two_class_blobs_fit_in_five_epochs(blobs):
    a = new_minimal(blobs.input_shape, 2, 4)
    cfg = smoke_config(epochs_per_phase=5)
    p, m = train_phase(a, None, TrainingVariant.NOREG_RI, blobs, cfg)
    assert accuracy(a, p, blobs.x_train, blobs.y_train) == 1.0
    assert len(m["loss_curve"]) == 5 and m["steps"] == 5 * 4


def test_train_phase_deterministic_and_pure(blobs, rng):
    a = new_minimal(blobs.input_shape, 2, 4)
    p0 = init_params(a, rng)
    snapshot = p0["stem"].kernel.copy()
    cfg = smoke_config(epochs_per_phase=2, augmentation=True)
    p1, m1 = train_phase(a, p0, TrainingVariant.WITH_REG, blobs, cfg, seed=(5,))
    p2, m2 = train_phase(a, p0, TrainingVariant.WITH_REG, blobs, cfg, seed=(5,))
    assert np.array_equal(p0["stem"].kernel, snapshot)
    assert m1 == m2
    for layer in p1:
        for name, arr in p1[layer].arrays().items():
            assert arr.tobytes() == getattr(p2[layer], name).tobytes()


def test_nonfinite_input_aborts(blobs):
    from resbuilder.pipeline import TrainingDiverged
    bad = Dataset(blobs.x_train.copy(), blobs.y_train, blobs.x_test, blobs.y_test, 2)
    bad.x_train[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_phase(new_minimal(bad.input_shape, 2, 4), None, TrainingVariant.NOREG_RI, bad, smoke_config())


@pytest.fixture(scope="module")
def small_run(tmp_path_factory, blobs):
    out = tmp_path_factory.mktemp("run")
    cfg = smoke_config(n_m=2, n_lambda=2)
    return out, cfg, run_resbuilder("minimal", blobs, cfg, out_dir=out)


def test_loop_shape_single_round(blobs):
    hist = run_resbuilder("minimal", blobs, smoke_config(n_m=1, n_lambda=1))
    kinds = [r.event for r in hist.records]
    assert kinds[0] == "init" and kinds[-1] == "morph"
    assert kinds.count("insert") == 1 and kinds.count("remove") <= 1 and kinds.count("morph") == 1
    assert hist.terminal is None


def test_loop_shape_and_budget(small_run):
    _, cfg, hist = small_run
    assert len(hist.events("insert")) == cfg.n_m * cfg.n_lambda
    assert len(hist.events("morph")) == cfg.n_m
    steps = [r.step_index for r in hist.records]
    assert steps == sorted(set(steps))
    for r in hist.events("morph"):
        assert r.flops <= cfg.zeta


def test_warm_start_matches_withreg_checkpoint(small_run):
    _, _, hist = small_run
    for r in hist.records:
        if r.event in ("insert", "remove", "morph"):
            assert r.detail["noreg_wi_acc_start"] == r.acc_withreg
            assert r.acc_noreg_ri is not None and r.acc_noreg_wi is not None


def test_snapshots_deserialize(small_run):
    out, _, hist = small_run
    for r in hist.records:
        arch, params = load_architecture(out / r.arch_file)
        arch.validate()
        assert arch == r.arch and flops(arch) == r.flops and arch.depth == r.depth


def test_csv_round_trip(small_run):
    out, _, hist = small_run
    text = (out / "history.csv").read_text()
    assert text == hist.to_csv()
    again = RunHistory.from_csv(text, root=out)
    assert again.records == hist.records and again.to_csv() == text
    assert [r.arch for r in again.records] == [r.arch for r in hist.records]


def test_full_run_deterministic(blobs):
    cfg = smoke_config(n_m=1, n_lambda=2)
    assert run_resbuilder("minimal", blobs, cfg).to_csv() == run_resbuilder("minimal", blobs, cfg).to_csv()


def test_infeasible_budget_is_terminal(blobs):
    hist = run_resbuilder("minimal", blobs, smoke_config(n_m=2, n_lambda=1, zeta=10.0))
    assert hist.terminal == "infeasible" and hist.records[-1].event == "infeasible"
    assert len(hist.events("morph")) == 0 and "budget" in hist.records[-1].detail["error"]


def test_divergence_is_terminal(blobs):
    bad = Dataset(blobs.x_train.copy(), blobs.y_train, blobs.x_test, blobs.y_test, 2)
    bad.x_train[3] = np.inf
    with np.errstate(invalid="ignore"):
        hist = run_resbuilder("minimal", bad, smoke_config(noreg_schedule="never"))
    assert hist.terminal == "diverged" and [r.event for r in hist.records] == ["init", "diverged"]


def test_init_from_file(tmp_path, blobs):
    from resbuilder.serialize import save_architecture
    a = new_minimal(blobs.input_shape, 2, 4)
    a.stages[0].blocks.append(ResBlock(a.fresh_id(), 4, 4))
    save_architecture(a, tmp_path / "start")
    hist = run_resbuilder(tmp_path / "start", blobs, smoke_config(n_m=1, n_lambda=1, noreg_schedule="never"))
    assert hist.records[0].arch == a
    wrong = new_minimal((10, 10, 1), 2, 4)
    save_architecture(wrong, tmp_path / "wrong")
    with pytest.raises(ValueError, match="does not match"):
        run_resbuilder(tmp_path / "wrong", blobs, smoke_config())


def _rec(step, acc, fl, event="insert"):
    return HistoryRecord(step, event, fl, 0, 4, acc_noreg_ri=acc)


def test_select_best_rules():
    with pytest.raises(ValueError):
        select_best(RunHistory())
    assert select_best(RunHistory([_rec(0, 0.3, 10)]))[0] == 0
    assert select_best(RunHistory([_rec(0, 0.8, 20), _rec(1, 0.8, 10)]))[0] == 1
    assert select_best(RunHistory([_rec(0, 0.8, 10), _rec(1, 0.8, 10)]))[0] == 0
    h = RunHistory([_rec(0, 0.5, 10), _rec(1, None, 1)])
    h.records[1].acc_noreg_wi = 0.9
    assert select_best(h)[0] == 1


def test_select_best_linear_scan(small_run):
    _, _, hist = small_run
    best_step, best_acc, best_flops = None, -1.0, None
    for r in hist.records:
        accs = [v for v in (r.acc_noreg_ri, r.acc_noreg_wi) if v is not None]
        if not accs:
            continue
        acc = max(accs)
        if acc > best_acc or (acc == best_acc and r.flops < best_flops):
            best_step, best_acc, best_flops = r.step_index, acc, r.flops
    step, arch = select_best(hist)
    assert step == best_step and arch == hist.records[step].arch


def test_removal_stats_examples():
    assert removal_position_stats(RunHistory())["count"] == 0
    h = RunHistory([HistoryRecord(3, "remove", 1, 3, 4, detail={"removed": [{"relative_position": 0.5}]})])
    stats = removal_position_stats(h)
    assert stats["positions"] == [0.5] and stats["histogram"][5] == 1


def test_removal_stats_recount(blobs):
    # threshold far above any fresh block's mass: every inserted block is removed at once
    hist = run_resbuilder("minimal", blobs, smoke_config(tau_lasso=50.0, noreg_schedule="never"))
    removes = hist.events("remove")
    assert len(removes) == 4
    raw = []
    for r in removes:
        for item in r.detail["removed"]:
            raw.append(item["relative_position"])
    stats = removal_position_stats(hist)
    assert stats["positions"] == raw and stats["count"] == 4
    counts = [0] * 10
    for v in raw:
        counts[min(int(v * 10), 9)] += 1
    assert stats["histogram"] == counts
    assert all(r.detail["collapsed"] for r in removes)
    assert collapsed(hist)


def test_sweep_needs_two_strengths(blobs):
    with pytest.raises(ValueError):
        regularization_sweep([1e-3], blobs, smoke_config())


def test_sweep_rows(blobs, tmp_path):
    rows = regularization_sweep([0.0, 1.0], blobs, smoke_config(n_m=1, n_lambda=1), out_dir=tmp_path)
    assert [r.strength for r in rows] == [0.0, 1.0]
    assert rows[0].flops >= rows[1].flops and not rows[0].collapsed
    assert (tmp_path / "strength_0" / "history.csv").exists()
