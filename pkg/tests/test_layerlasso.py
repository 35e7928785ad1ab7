import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_arch, random_params
from resbuilder.arch import Architecture, PoolStage, ResBlock, forward, new_minimal
from resbuilder.layerlasso import block_masses, blocks_below_threshold, lasso_penalty, prune_blocks


def plain_chain(n_blocks, width=3, size=6):
    a = Architecture((size, size, 1), 2, width, [PoolStage([], True)])
    for _ in range(n_blocks):
        a.stages[0].blocks.append(ResBlock(a.fresh_id(), width, width))
    return a


def test_penalty_zero_blocks(rng):
    a = new_minimal((8, 8, 1), 2, 4)
    assert lasso_penalty(a, random_params(a, rng)).item() == 0.0


def test_penalty_unit_weights(rng):
    a = plain_chain(1, width=2)
    p = random_params(a, rng)
    for layer in ("b0.conv1", "b0.conv2"):
        p[layer].kernel = rng.choice([-1.0, 1.0], size=p[layer].kernel.shape)
    assert lasso_penalty(a, p).item() == 2 * 9 * 2 * 2


def test_penalty_excludes_stem_projection_and_head(rng):
    a = random_arch(rng, max_blocks=5)
    p = random_params(a, rng)
    expected = sum(np.abs(p[f"{b.id}.{c}"].kernel).sum() for b in a.blocks for c in ("conv1", "conv2"))
    assert lasso_penalty(a, p).item() == pytest.approx(expected, rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 10.0))
def test_penalty_homogeneous_and_permutation_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    a = random_arch(rng, max_blocks=4)
    p = random_params(a, rng)
    base = lasso_penalty(a, p).item()
    for b in a.blocks:
        for c in ("conv1", "conv2"):
            k = p[f"{b.id}.{c}"].kernel
            p[f"{b.id}.{c}"].kernel = rng.permutation(k.ravel()).reshape(k.shape)
    assert lasso_penalty(a, p).item() == pytest.approx(base, rel=1e-12)
    for b in a.blocks:
        for c in ("conv1", "conv2"):
            p[f"{b.id}.{c}"].kernel = p[f"{b.id}.{c}"].kernel * alpha
    assert lasso_penalty(a, p).item() == pytest.approx(alpha * base, rel=1e-12, abs=1e-300)


def _set_mass(p, layer, mass):
    k = p[layer].kernel
    p[layer].kernel = np.full(k.shape, mass / k.size)


def test_threshold_examples(rng):
    a = plain_chain(3)
    p = random_params(a, rng)
    _set_mass(p, "b0.conv1", 1e-5)
    _set_mass(p, "b0.conv2", 10.0)
    _set_mass(p, "b1.conv1", 2e-3)
    _set_mass(p, "b1.conv2", 3.0)
    assert blocks_below_threshold(a, p, 1e-3) == ["b0"]


def test_exact_threshold_not_flagged(rng):
    a = plain_chain(1, width=1)
    p = random_params(a, rng)
    for layer in ("b0.conv1", "b0.conv2"):
        k = np.zeros((3, 3, 1, 1))
        k[0, 0, 0, 0] = 1e-3
        p[layer].kernel = k
    assert block_masses(a, p)["b0"] == (1e-3, 1e-3)
    assert blocks_below_threshold(a, p, 1e-3) == []
    p["b0.conv2"].kernel[0, 0, 0, 0] = np.nextafter(1e-3, 0)
    assert blocks_below_threshold(a, p, 1e-3) == ["b0"]


def test_normalized_mode(rng):
    a = plain_chain(1, width=4)
    p = random_params(a, rng)
    _set_mass(p, "b0.conv1", 0.05)
    _set_mass(p, "b0.conv2", 5.0)
    assert blocks_below_threshold(a, p, 1e-3) == []
    assert blocks_below_threshold(a, p, 1e-3, normalized=True) == ["b0"]


def test_prune_nothing_is_identity(rng):
    a = random_arch(rng)
    p = random_params(a, rng)
    a2, p2, recs = prune_blocks(a, p, 1e-12)
    assert a2 is a and p2 is p and recs == []


def _fresh_stats(p, layer):
    p[layer].bn_running_mean = np.zeros(p[layer].c_out)
    p[layer].bn_running_var = np.ones(p[layer].c_out)
    p[layer].bn_beta = np.zeros(p[layer].c_out)


def test_prune_zero_block_keeps_outputs_and_survivors(rng):
    a = plain_chain(4)
    p = random_params(a, rng)
    for layer in ("b2.conv1", "b2.conv2"):
        p[layer].kernel[...] = 0.0
        _fresh_stats(p, layer)
    x = rng.normal(size=(3, 6, 6, 1))
    a2, p2, recs = prune_blocks(a, p, 1e-3, step=7)
    assert [b.id for b in a2.blocks] == ["b0", "b1", "b3"]
    np.testing.assert_array_equal(forward(a, p, x), forward(a2, p2, x))
    for layer, lp in p2.items():
        for name, arr in lp.arrays().items():
            assert arr.tobytes() == getattr(p[layer], name).tobytes()
    assert recs == [{"pipeline_step": 7, "block_id": "b2", "stage_index": 0, "relative_position": 0.75,
                     "birth_step": 0, "l1_mass_conv1": 0.0, "l1_mass_conv2": 0.0}]


def test_prune_small_block_change_shrinks_with_mass(rng):
    a = plain_chain(2)
    base = random_params(a, rng)
    x = rng.normal(size=(4, 6, 6, 1))
    diffs = []
    for scale in (1e-2, 1e-3, 1e-4):
        p = base.copy()
        for layer in ("b1.conv1", "b1.conv2"):
            p[layer].kernel = base[layer].kernel * scale
            _fresh_stats(p, layer)
        mass = min(block_masses(a, p)["b1"])
        a2, p2, recs = prune_blocks(a, p, tau=mass * 1.01)
        assert [r["block_id"] for r in recs] == ["b1"]
        diffs.append(np.max(np.abs(forward(a, p, x) - forward(a2, p2, x))))
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 1e-6


def test_relative_positions_span_stages(rng):
    a = Architecture((8, 8, 1), 2, 2, [PoolStage([ResBlock("b0", 2, 2), ResBlock("b1", 2, 2)], True),
                                        PoolStage([ResBlock("b2", 2, 2), ResBlock("b3", 2, 2)], True)],
                     next_block_id=4)
    p = random_params(a, rng)
    for layer in ("b1.conv1", "b3.conv2"):
        p[layer].kernel[...] = 0.0
    _, _, recs = prune_blocks(a, p, 1e-3)
    assert [(r["block_id"], r["stage_index"], r["relative_position"]) for r in recs] == [
        ("b1", 0, 0.5), ("b3", 1, 1.0)]
