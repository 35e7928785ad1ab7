"""L1 penalty on residual-block kernels and threshold-based block removal."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .arch import Architecture, ParamStore, remove_blocks
from .autodiff import Tensor, l1_penalty


@dataclass
class LassoConfig:
    lambda_lasso: float = 1e-8
    tau_lasso: float = 1e-3
    normalized: bool = False  # compare mean |w| instead of total mass

    def __post_init__(self):
        if self.lambda_lasso < 0 or self.tau_lasso <= 0:
            raise ValueError(f"invalid LassoConfig {self}")


def lasso_penalty(arch: Architecture, params: ParamStore, tensors: Optional[Mapping] = None) -> Tensor:
    """Sum of |w| over the two convolution kernels of every block.

    The stem, skip projections and the dense head are not penalised.
    """
    if tensors is None:
        tensors = params.leaves()
    kernels = []
    for b in arch.blocks:
        kernels += [tensors[(f"{b.id}.conv1", "kernel")], tensors[(f"{b.id}.conv2", "kernel")]]
    return l1_penalty(kernels)


def block_masses(arch: Architecture, params: ParamStore, normalized: bool = False) -> Dict[str, Tuple[float, float]]:
    out = {}
    for b in arch.blocks:
        ks = [params[f"{b.id}.conv1"].kernel, params[f"{b.id}.conv2"].kernel]
        out[b.id] = tuple(float(np.abs(k).sum() / (k.size if normalized else 1)) for k in ks)
    return out


def blocks_below_threshold(arch: Architecture, params: ParamStore, tau: float,
                           normalized: bool = False) -> List[str]:
    """Blocks where at least one conv layer's L1 mass is strictly below tau."""
    return [bid for bid, (m1, m2) in block_masses(arch, params, normalized).items() if m1 < tau or m2 < tau]


def prune_blocks(arch: Architecture, params: ParamStore, tau: float, normalized: bool = False,
                 step: int = 0):
    """Remove every flagged block; returns (arch, params, removal records).

    Surviving layers keep their tensors unless a removed block carried a skip
    projection, which is then folded into the next consumer.
    """
    flagged = blocks_below_threshold(arch, params, tau, normalized)
    if not flagged:
        return arch, params, []
    masses = block_masses(arch, params)
    depth = arch.depth
    records = []
    for gi, (si, pos, b) in enumerate(arch.iter_blocks(), start=1):
        if b.id in flagged:
            records.append({
                "pipeline_step": step,
                "block_id": b.id,
                "stage_index": si,
                "relative_position": gi / depth,
                "birth_step": b.birth_step,
                "l1_mass_conv1": masses[b.id][0],
                "l1_mass_conv2": masses[b.id][1],
            })
    new_arch, new_params = remove_blocks(arch, params, flagged)
    return new_arch, new_params, records
