"""Random block insertion with near-zero initial weights."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .arch import Architecture, ParamStore, ResBlock, check_params, init_block_params


@dataclass
class InsertConfig:
    theta_init: float = 1e-2
    n_lambda: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.theta_init <= 0 or self.n_lambda < 1:
            raise ValueError(f"invalid InsertConfig {self}")


def pick_insertion_point(arch: Architecture, rng: np.random.Generator) -> Tuple[int, int]:
    """Uniform stage, then uniform slot: 0 is the stage entry, i is after block i."""
    if not arch.stages:
        raise ValueError("architecture has no stages")
    stage = int(rng.integers(len(arch.stages)))
    position = int(rng.integers(len(arch.stages[stage].blocks) + 1))
    return stage, position


def insert_block(arch: Architecture, params: ParamStore, point: Tuple[int, int], rng: np.random.Generator,
                 theta_init: float = 1e-2, step: int = 0):
    """Insert a two-conv block whose width matches the stream at ``point``.

    Kernels are i.i.d. uniform on [-2*theta_init, 2*theta_init] (mean |w| is
    theta_init); gamma is 1, beta 0, running statistics fresh. Returns
    (arch, params, event).
    """
    stage, position = point
    if not (0 <= stage < len(arch.stages) and 0 <= position <= len(arch.stages[stage].blocks)):
        raise ValueError(f"invalid insertion point {point}")
    new_arch = arch.copy()
    width = new_arch.stream_width_at(stage, position)
    block = ResBlock(new_arch.fresh_id(), width, width, projection=False, birth_step=step)
    new_arch.stages[stage].blocks.insert(position, block)
    new_params = params.copy()
    new_params.update(init_block_params(block, width, rng, scale=theta_init))
    new_arch.validate()
    check_params(new_arch, new_params)
    event = {"pipeline_step": step, "block_id": block.id, "stage": stage, "position": position,
             "widths": [width, width], "theta_init": theta_init}
    return new_arch, new_params, event
