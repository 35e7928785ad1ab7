import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from resbuilder.arch import Architecture, PoolStage, ResBlock, init_params
from resbuilder.data import synthetic_blobs
from resbuilder.pipeline import TrainConfig

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_arch(rng, size=8, channels=1, n_classes=3, max_blocks=4, max_width=6, n_stages=None,
                allow_projection=True):
    """A random valid architecture; block widths vary so projections appear."""
    n_stages = int(rng.integers(1, 3)) if n_stages is None else n_stages
    stem = int(rng.integers(1, max_width + 1))
    arch = Architecture((size, size, channels), n_classes, stem, [PoolStage([], True) for _ in range(n_stages)])
    width = stem
    for _ in range(int(rng.integers(0, max_blocks + 1))):
        stage = arch.stages[int(rng.integers(n_stages))]
        if allow_projection:
            m, o = (int(v) for v in rng.integers(1, max_width + 1, size=2))
        else:
            m, o = int(rng.integers(1, max_width + 1)), stem
        stage.blocks.append(ResBlock(arch.fresh_id(), m, o, birth_step=int(rng.integers(0, 10))))
    arch.fix_projections()
    arch.validate()
    return arch


def random_params(arch, rng, perturb_bn=True):
    params = init_params(arch, rng)
    if perturb_bn:
        for p in params.values():
            if p.has_bn:
                c = p.c_out
                p.bn_gamma = rng.normal(1.0, 0.5, c)
                p.bn_beta = rng.normal(0.0, 0.3, c)
                p.bn_running_mean = rng.normal(0.0, 0.2, c)
                p.bn_running_var = rng.uniform(0.5, 2.0, c)
    params["head"].bias = rng.normal(size=arch.n_classes)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    return synthetic_blobs(2, 32, size=12, rng=np.random.default_rng(0))


def smoke_config(**kw):
    base = dict(epochs_per_phase=1, batch_size=16, n_m=2, n_lambda=2, stem_width=4, zeta=2e5,
                learning_rate=1e-2, bn_momentum=0.9, augmentation=False, lambda_m=1e-7,
                eval_batch_size=256)
    base.update(kw)
    return TrainConfig(**base)


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(n, ok, detail)."""
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
