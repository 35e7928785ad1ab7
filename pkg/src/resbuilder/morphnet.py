"""FLOP-weighted group lasso on batch-norm scales and the shrink/expand routine."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from .arch import Architecture, ParamStore, Widths, apply_widths, flops, layer_costs, scale_widths
from .autodiff import Tensor, abs_sum, scale, total

OMEGA_RESOLUTION = 1e-3
OMEGA_MAX = 16.0


class BudgetInfeasibleError(RuntimeError):
    pass


@dataclass
class MorphConfig:
    lambda_m: float = 1e-7
    tau_m: float = 1e-2
    zeta: float = 1e8
    n_m: int = 7

    def __post_init__(self):
        if self.lambda_m < 0 or self.tau_m <= 0 or self.zeta <= 0 or self.n_m < 1:
            raise ValueError(f"invalid MorphConfig {self}")


def gamma_layers(arch: Architecture):
    """(layer, producer-of-its-input or None) for every conv with a batch-norm."""
    pairs = [("stem", None)]
    prev = "stem"
    for b in arch.blocks:
        pairs.append((f"{b.id}.conv1", prev))
        pairs.append((f"{b.id}.conv2", f"{b.id}.conv1"))
        prev = f"{b.id}.conv2"
    return pairs


def morph_penalty(arch: Architecture, params: ParamStore, tau_m: float = 1e-2,
                  tensors: Optional[Mapping] = None) -> Tensor:
    """Sum over conv layers of C_j * (sum|g_in| * alive_out + alive_in * sum|g_out|).

    Alive counts (|gamma| > tau_m) are constants of the step. The stem's input
    is the image, whose channels all count as alive and carry no gamma.
    """
    if tensors is None:
        tensors = params.leaves()
    cost = {c.layer: c for c in layer_costs(arch)}
    terms = []
    for layer, producer in gamma_layers(arch):
        g_out = tensors[(layer, "bn_gamma")]
        alive_out = int(np.count_nonzero(np.abs(g_out.data) > tau_m))
        c_j = cost[layer].flops
        if producer is None:
            alive_in = cost[layer].c_in
        else:
            g_in = tensors[(producer, "bn_gamma")]
            alive_in = int(np.count_nonzero(np.abs(g_in.data) > tau_m))
            terms.append(scale(abs_sum(g_in), c_j * alive_out))
        terms.append(scale(abs_sum(g_out), c_j * alive_in))
    return total(terms)


def shrink_widths(arch: Architecture, params: ParamStore, tau_m: float = 1e-2) -> Widths:
    """Alive channel counts per block; a zero marks the block for removal."""
    out = {}
    for b in arch.blocks:
        g1 = params[f"{b.id}.conv1"].bn_gamma
        g2 = params[f"{b.id}.conv2"].bn_gamma
        out[b.id] = (int(np.count_nonzero(np.abs(g1) > tau_m)), int(np.count_nonzero(np.abs(g2) > tau_m)))
    return out


def _grid_step(resolution: float) -> float:
    return math.log1p(resolution)


def grid_omega(k: int, resolution: float = OMEGA_RESOLUTION) -> float:
    return math.exp(k * _grid_step(resolution))


def next_grid_omega(omega: float, resolution: float = OMEGA_RESOLUTION) -> float:
    k = round(math.log(omega) / _grid_step(resolution))
    return grid_omega(k + 1, resolution)


def flops_curve(arch: Architecture, widths: Mapping[str, Tuple[int, int]], omegas: np.ndarray) -> np.ndarray:
    """Exact integer FLOPs of scale_widths(omega * widths) for every omega."""
    a = arch.with_widths(widths)
    omegas = np.asarray(omegas, dtype=np.float64)
    costs = layer_costs(a)
    total_ = np.full(omegas.shape, costs[0].flops, dtype=np.int64)
    win = np.full(omegas.shape, a.stem_width, dtype=np.int64)
    for (u, v), stage in zip(a.stage_spatial(), a.stages):
        for b in stage.blocks:
            m = np.maximum(1, np.floor(omegas * b.c_mid)).astype(np.int64)
            o = np.maximum(1, np.floor(omegas * b.c_out)).astype(np.int64)
            total_ += 18 * u * v * win * m + 18 * u * v * m * o
            total_ += np.where(win != o, 2 * u * v * win * o, 0)
            win = o
    hh, ww = a.head_spatial()
    total_ += 2 * hh * ww * win * a.n_classes
    return total_


def expand_omega(widths: Mapping[str, Tuple[int, int]], zeta: float, arch: Architecture,
                 resolution: float = OMEGA_RESOLUTION, omega_max: float = OMEGA_MAX) -> float:
    """Largest omega on the geometric grid (1 + resolution)^k, omega <= omega_max,
    with FLOPs(scale_widths(omega * widths)) <= zeta.

    The whole grid is scanned: skip projections appear and vanish as widths
    cross each other, so FLOPs are not monotone in omega.
    """
    live = {k: v for k, v in widths.items() if min(v) > 0}
    cmax = max((max(v) for v in live.values()), default=1)
    step = _grid_step(resolution)
    k_hi = math.floor(math.log(omega_max) / step + 1e-9)
    k_lo = math.floor(-math.log(cmax + 1) / step) - 1
    ks = np.arange(k_lo, k_hi + 1)
    omegas = np.exp(ks * step)
    curve = flops_curve(arch, live, omegas)
    ok = np.nonzero(curve <= zeta)[0]
    if ok.size == 0:
        raise BudgetInfeasibleError(f"minimum achievable FLOPs {int(curve.min())} exceed budget {zeta:g}")
    return float(grid_omega(int(ks[ok.max()]), resolution))


def morph_routine(arch: Architecture, params: ParamStore, config: MorphConfig,
                  train: Optional[Callable[[Architecture, ParamStore], ParamStore]] = None,
                  rng: Optional[np.random.Generator] = None, init_scale: float = 1e-2,
                  omega: Optional[float] = None, step: int = 0):
    """Train (optional callback), shrink to alive widths, expand by the largest omega.

    Returns (arch, params, record). ``omega`` overrides the search.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if train is not None:
        params = train(arch, params)
    widths_before = arch.widths()
    flops_before = flops(arch)
    c_prime = shrink_widths(arch, params, config.tau_m)
    dead = [bid for bid, w in c_prime.items() if min(w) == 0]
    collapsed = arch.depth > 0 and len(dead) == arch.depth
    shrunk, params = apply_widths(arch, params, c_prime, rng=rng, init_scale=init_scale)
    flops_shrunk = flops(shrunk)
    if omega is None:
        omega = expand_omega(shrunk.widths(), config.zeta, shrunk)
    target = scale_widths(shrunk, omega)
    new_arch, params = apply_widths(shrunk, params, target, rng=rng, init_scale=init_scale)
    record = {
        "step": step,
        "widths_before": widths_before,
        "c_prime": c_prime,
        "omega": omega,
        "widths_after": new_arch.widths(),
        "dead_blocks": dead,
        "collapsed": collapsed,
        "flops_before": flops_before,
        "flops_shrunk": flops_shrunk,
        "flops_after": flops(new_arch),
    }
    return new_arch, params, record
