"""Editable ResNet architectures, their parameters, forward pass and FLOP cost.

An architecture is a stem convolution, an ordered list of pooling stages of
two-convolution residual blocks, and a dense head:

    F = softmax . dense . (stages of blocks, 2x2 max-pools between) . stem

Blocks are feature-map-size preserving (3x3 same-padding, stride 1). A block
whose input width differs from its output width carries a 1x1 projection on
the skip path.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, add, flatten
from .layers import BN_EPS, BN_MOMENTUM, LayerParams, batchnorm, bn_params, conv2d, dense, maxpool2, relu, softmax

Widths = Dict[str, Tuple[int, int]]


@dataclass
class ResBlock:
    id: str
    c_mid: int
    c_out: int
    projection: bool = False
    birth_step: int = 0


@dataclass
class PoolStage:
    blocks: List[ResBlock] = field(default_factory=list)
    pool: bool = True


@dataclass
class Architecture:
    input_shape: Tuple[int, int, int]
    n_classes: int
    stem_width: int
    stages: List[PoolStage]
    stem_kernel: int = 3
    next_block_id: int = 0

    def copy(self) -> "Architecture":
        return copy.deepcopy(self)

    def iter_blocks(self) -> Iterator[Tuple[int, int, ResBlock]]:
        for si, stage in enumerate(self.stages):
            for pos, blk in enumerate(stage.blocks):
                yield si, pos, blk

    @property
    def blocks(self) -> List[ResBlock]:
        return [b for _, _, b in self.iter_blocks()]

    @property
    def depth(self) -> int:
        return sum(len(s.blocks) for s in self.stages)

    def block(self, block_id: str) -> ResBlock:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise KeyError(block_id)

    def fresh_id(self) -> str:
        bid = f"b{self.next_block_id}"
        self.next_block_id += 1
        return bid

    def widths(self) -> Widths:
        return {b.id: (b.c_mid, b.c_out) for b in self.blocks}

    def stage_spatial(self) -> List[Tuple[int, int]]:
        """Spatial size seen by the blocks of every stage."""
        h, w, _ = self.input_shape
        out = []
        for stage in self.stages:
            out.append((h, w))
            if stage.pool:
                h, w = h // 2, w // 2
        return out

    def head_spatial(self) -> Tuple[int, int]:
        h, w, _ = self.input_shape
        for stage in self.stages:
            if stage.pool:
                h, w = h // 2, w // 2
        return h, w

    def block_inputs(self) -> Dict[str, int]:
        width = self.stem_width
        ins = {}
        for b in self.blocks:
            ins[b.id] = width
            width = b.c_out
        return ins

    def stream_width_at(self, stage_index: int, position: int) -> int:
        """Channel width of the feature map at an insertion slot."""
        width = self.stem_width
        for si, pos, b in self.iter_blocks():
            if (si, pos) >= (stage_index, position):
                break
            width = b.c_out
        return width

    @property
    def final_width(self) -> int:
        blocks = self.blocks
        return blocks[-1].c_out if blocks else self.stem_width

    @property
    def head_inputs(self) -> int:
        h, w = self.head_spatial()
        return h * w * self.final_width

    def layer_ids(self) -> List[str]:
        ids = ["stem"]
        for b in self.blocks:
            ids += [f"{b.id}.conv1", f"{b.id}.conv2"]
            if b.projection:
                ids.append(f"{b.id}.proj")
        ids.append("head")
        return ids

    def fix_projections(self) -> None:
        ins = self.block_inputs()
        for b in self.blocks:
            b.projection = ins[b.id] != b.c_out

    def with_widths(self, widths: Mapping[str, Tuple[int, int]]) -> "Architecture":
        """Structure only: widths replaced, zero-width blocks dropped."""
        arch = self.copy()
        for stage in arch.stages:
            kept = []
            for b in stage.blocks:
                m, o = widths.get(b.id, (b.c_mid, b.c_out))
                if m > 0 and o > 0:
                    b.c_mid, b.c_out = int(m), int(o)
                    kept.append(b)
            stage.blocks = kept
        arch.fix_projections()
        return arch

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("architecture needs at least one stage")
        h, w = self.head_spatial()
        if h < 1 or w < 1:
            raise ValueError("spatial dims vanish after pooling")
        for (sh, sw), stage in zip(self.stage_spatial(), self.stages):
            if stage.pool and (sh < 2 or sw < 2):
                raise ValueError("cannot pool a feature map smaller than 2x2")
        ins = self.block_inputs()
        ids = set()
        for b in self.blocks:
            if b.id in ids:
                raise ValueError(f"duplicate block id {b.id}")
            ids.add(b.id)
            if b.c_mid < 1 or b.c_out < 1:
                raise ValueError(f"block {b.id} has non-positive width")
            if b.projection != (ins[b.id] != b.c_out):
                raise ValueError(f"block {b.id}: projection flag inconsistent with widths")


def new_minimal(input_shape, n_classes: int, stem_width: int = 16, n_stages: int = 2) -> Architecture:
    """Start net: one conv, ``n_stages`` empty stages each closed by a pool, dense head."""
    h, w, _ = input_shape
    if min(h, w) < 2 ** n_stages:
        raise ValueError(f"input {h}x{w} too small for {n_stages} poolings")
    return Architecture(tuple(input_shape), n_classes, stem_width,
                        [PoolStage([], True) for _ in range(n_stages)])


def resnet18(input_shape, n_classes: int, widths=(64, 128, 256, 512)) -> Architecture:
    arch = Architecture(tuple(input_shape), n_classes, widths[0], [])
    for i, c in enumerate(widths):
        stage = PoolStage([], pool=i < len(widths) - 1)
        for _ in range(2):
            stage.blocks.append(ResBlock(arch.fresh_id(), c, c))
        arch.stages.append(stage)
    arch.fix_projections()
    arch.validate()
    return arch


# --- parameters ---------------------------------------------------------------

class ParamStore(dict):
    """Layer identity -> LayerParams."""

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.items()})

    def trainable(self) -> Dict[Tuple[str, str], np.ndarray]:
        out = {}
        for layer, p in self.items():
            for name in LayerParams.TRAINABLE:
                arr = getattr(p, name)
                if arr is not None:
                    out[(layer, name)] = arr
        return out

    def leaves(self) -> Dict[Tuple[str, str], Tensor]:
        return {key: Tensor(arr, requires_grad=True, name=f"{key[0]}.{key[1]}")
                for key, arr in self.trainable().items()}

    def constants(self) -> Dict[Tuple[str, str], Tensor]:
        return {key: Tensor(arr) for key, arr in self.trainable().items()}


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    if len(shape) == 4:
        rf = shape[0] * shape[1]
        fan_in, fan_out = rf * shape[2], rf * shape[3]
    else:
        fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def identity_projection(c_in: int, c_out: int) -> np.ndarray:
    k = np.zeros((1, 1, c_in, c_out))
    n = min(c_in, c_out)
    k[0, 0, np.arange(n), np.arange(n)] = 1.0
    return k


def init_block_params(block: ResBlock, c_in: int, rng: np.random.Generator,
                      scale: Optional[float] = None) -> Dict[str, LayerParams]:
    """Kernels are Glorot-uniform, or uniform on [-2*scale, 2*scale] if given."""
    shapes = {"conv1": (3, 3, c_in, block.c_mid), "conv2": (3, 3, block.c_mid, block.c_out)}
    out = {}
    for name, shape in shapes.items():
        k = glorot(rng, shape) if scale is None else rng.uniform(-2 * scale, 2 * scale, size=shape)
        out[f"{block.id}.{name}"] = bn_params(k)
    if block.projection:
        out[f"{block.id}.proj"] = LayerParams(kernel=identity_projection(c_in, block.c_out))
    return out


def init_params(arch: Architecture, rng: np.random.Generator) -> ParamStore:
    k = arch.stem_kernel
    params = ParamStore()
    params["stem"] = bn_params(glorot(rng, (k, k, arch.input_shape[2], arch.stem_width)))
    ins = arch.block_inputs()
    for b in arch.blocks:
        params.update(init_block_params(b, ins[b.id], rng))
    params["head"] = LayerParams(kernel=glorot(rng, (arch.head_inputs, arch.n_classes)),
                                 bias=np.zeros(arch.n_classes))
    return params


def expected_shapes(arch: Architecture) -> Dict[str, Tuple[int, ...]]:
    k = arch.stem_kernel
    shapes = {"stem": (k, k, arch.input_shape[2], arch.stem_width)}
    ins = arch.block_inputs()
    for b in arch.blocks:
        shapes[f"{b.id}.conv1"] = (3, 3, ins[b.id], b.c_mid)
        shapes[f"{b.id}.conv2"] = (3, 3, b.c_mid, b.c_out)
        if b.projection:
            shapes[f"{b.id}.proj"] = (1, 1, ins[b.id], b.c_out)
    shapes["head"] = (arch.head_inputs, arch.n_classes)
    return shapes


def check_params(arch: Architecture, params: Mapping[str, LayerParams]) -> None:
    shapes = expected_shapes(arch)
    if set(shapes) != set(params):
        raise ShapeError(None, f"parameter layers {sorted(params)} != live layers {sorted(shapes)}")
    for layer, shape in shapes.items():
        if params[layer].kernel.shape != shape:
            raise ShapeError(layer, f"kernel shape {params[layer].kernel.shape} != {shape}")
        params[layer].validate(layer)


# --- forward -----------------------------------------------------------------

def _conv_bn_relu(x, layer, tensors, params, mode, momentum):
    p = params[layer]
    z = conv2d(x, tensors[(layer, "kernel")], name=layer)
    z = batchnorm(z, tensors[(layer, "bn_gamma")], tensors[(layer, "bn_beta")],
                  p.bn_running_mean, p.bn_running_var, mode=mode, momentum=momentum,
                  eps=BN_EPS, name=layer)
    return relu(z)


def forward_graph(arch: Architecture, params: ParamStore, x, mode: str = "infer",
                  tensors: Optional[Mapping] = None, momentum: float = BN_MOMENTUM) -> Tensor:
    """Logits as a differentiable graph; ``tensors`` maps (layer, name) to leaves."""
    if tensors is None:
        tensors = params.constants()
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError("stem", f"batch shape {x.shape[1:]} != input shape {arch.input_shape}")
    h = _conv_bn_relu(x, "stem", tensors, params, mode, momentum)
    for stage in arch.stages:
        for b in stage.blocks:
            r = _conv_bn_relu(h, f"{b.id}.conv1", tensors, params, mode, momentum)
            r = _conv_bn_relu(r, f"{b.id}.conv2", tensors, params, mode, momentum)
            skip = conv2d(h, tensors[(f"{b.id}.proj", "kernel")], name=f"{b.id}.proj") if b.projection else h
            h = add(skip, r)
        if stage.pool:
            h = maxpool2(h)
    return dense(flatten(h), tensors[("head", "kernel")], tensors[("head", "bias")], name="head")


def forward(arch: Architecture, params: ParamStore, batch: np.ndarray, mode: str = "infer",
            momentum: float = BN_MOMENTUM) -> np.ndarray:
    return forward_graph(arch, params, batch, mode=mode, momentum=momentum).data


def predict_proba(arch: Architecture, params: ParamStore, batch: np.ndarray) -> np.ndarray:
    return softmax(forward(arch, params, batch, mode="infer"))


# --- cost model ----------------------------------------------------------------

@dataclass(frozen=True)
class LayerCost:
    layer: str
    kind: str
    s: int
    u: int
    v: int
    c_in: int
    c_out: int

    @property
    def flops(self) -> int:
        return 2 * self.s * self.u * self.v * self.c_in * self.c_out


def layer_costs(arch: Architecture, widths: Optional[Mapping[str, Tuple[int, int]]] = None) -> List[LayerCost]:
    """Per-layer (s, u, v, c_in, c_out); convolutions and the dense head."""
    if widths is not None:
        arch = arch.with_widths(widths)
    h, w, c = arch.input_shape
    k = arch.stem_kernel
    costs = [LayerCost("stem", "conv", k * k, h, w, c, arch.stem_width)]
    ins = arch.block_inputs()
    for (u, v), stage in zip(arch.stage_spatial(), arch.stages):
        for b in stage.blocks:
            costs.append(LayerCost(f"{b.id}.conv1", "conv", 9, u, v, ins[b.id], b.c_mid))
            costs.append(LayerCost(f"{b.id}.conv2", "conv", 9, u, v, b.c_mid, b.c_out))
            if b.projection:
                costs.append(LayerCost(f"{b.id}.proj", "proj", 1, u, v, ins[b.id], b.c_out))
    costs.append(LayerCost("head", "dense", 1, 1, 1, arch.head_inputs, arch.n_classes))
    return costs


def flops(arch: Architecture, widths: Optional[Mapping[str, Tuple[int, int]]] = None) -> int:
    return sum(c.flops for c in layer_costs(arch, widths))


def scale_widths(arch: Architecture, omega: float, widths: Optional[Mapping[str, Tuple[int, int]]] = None) -> Widths:
    """Block widths max(1, floor(omega * c)); the stem is not scaled."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    widths = arch.widths() if widths is None else widths
    return {bid: (max(1, int(np.floor(omega * m))), max(1, int(np.floor(omega * o))))
            for bid, (m, o) in widths.items()}


# --- width edits -------------------------------------------------------------

class StreamMap:
    """Linear relation between an edited feature stream and the original one.

    ``old = new @ M`` channel-wise. Kept as an index selection (with -1 for
    fresh channels) whenever possible so that untouched weights are copied
    bit-exactly.
    """

    def __init__(self, old_width: int, sel: Optional[np.ndarray] = None, mat: Optional[np.ndarray] = None):
        self.old_width = old_width
        self.sel = None if sel is None else np.asarray(sel, dtype=np.int64)
        self.mat = mat

    @classmethod
    def identity(cls, width: int) -> "StreamMap":
        return cls(width, sel=np.arange(width))

    @property
    def new_width(self) -> int:
        return len(self.sel) if self.sel is not None else self.mat.shape[0]

    def is_identity(self) -> bool:
        return self.sel is not None and np.array_equal(self.sel, np.arange(self.old_width))

    def matrix(self) -> np.ndarray:
        if self.mat is not None:
            return self.mat
        m = np.zeros((len(self.sel), self.old_width))
        ok = self.sel >= 0
        m[np.nonzero(ok)[0], self.sel[ok]] = 1.0
        return m

    def remap_rows(self, kernel: np.ndarray) -> np.ndarray:
        """Re-express a consumer kernel (..., c_old, o) over the new stream."""
        if self.sel is None:
            return np.einsum("ic,...co->...io", self.mat, kernel)
        out = kernel[..., np.clip(self.sel, 0, None), :]
        out[..., self.sel < 0, :] = 0.0
        return out

    def through(self, skip: Optional[np.ndarray]) -> "StreamMap":
        """Map after a removed block whose skip matrix is ``skip`` (None = identity)."""
        if skip is None:
            return self
        return StreamMap(skip.shape[1], mat=self.matrix() @ skip)


def _keep(gamma: np.ndarray, width: int) -> np.ndarray:
    """Channels to keep: largest |gamma| first (ties to lower index), -1 pads."""
    c = len(gamma)
    if width >= c:
        return np.concatenate([np.arange(c), -np.ones(width - c, dtype=np.int64)])
    order = np.argsort(-np.abs(gamma), kind="stable")[:width]
    return np.sort(order)


def _select_out(kernel: np.ndarray, keep: np.ndarray, rng, scale: float) -> np.ndarray:
    out = kernel[..., np.clip(keep, 0, None)]
    fresh = keep < 0
    if fresh.any():
        out[..., fresh] = rng.uniform(-2 * scale, 2 * scale, size=out[..., fresh].shape)
    return out


def _select_bn(p: LayerParams, keep: np.ndarray, kernel: np.ndarray, reset: bool) -> LayerParams:
    idx = np.clip(keep, 0, None)
    fresh = keep < 0
    gamma, beta = p.bn_gamma[idx], p.bn_beta[idx]
    gamma[fresh], beta[fresh] = 1.0, 0.0
    out = LayerParams(kernel=kernel, bn_gamma=gamma, bn_beta=beta,
                      bn_running_mean=p.bn_running_mean[idx], bn_running_var=p.bn_running_var[idx])
    if reset:
        out.reset_running_stats()
    return out


def skip_matrix(block: ResBlock, params: Mapping[str, LayerParams]) -> Optional[np.ndarray]:
    if not block.projection:
        return None
    return params[f"{block.id}.proj"].kernel[0, 0]


def apply_widths(arch: Architecture, params: ParamStore, widths: Mapping[str, Tuple[int, int]],
                 rng: Optional[np.random.Generator] = None, init_scale: float = 1e-2):
    """Set block widths, carrying weights over.

    Shrinking keeps the channels with the largest |gamma|; growing appends
    channels with small random kernels (gamma 1, beta 0). A block given a
    zero width is removed and its skip path is folded into the next
    consumer. Layers whose tensors change get fresh running statistics.
    Blocks absent from ``widths`` keep their widths.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    new_arch = arch.copy()
    new = ParamStore(stem=params["stem"].copy())
    smap = StreamMap.identity(arch.stem_width)
    for stage in new_arch.stages:
        kept = []
        for b in stage.blocks:
            m_new, o_new = widths.get(b.id, (b.c_mid, b.c_out))
            if m_new <= 0 or o_new <= 0:
                smap = smap.through(skip_matrix(b, params))
                continue
            p1, p2 = params[f"{b.id}.conv1"], params[f"{b.id}.conv2"]
            keep_mid, keep_out = _keep(p1.bn_gamma, m_new), _keep(p2.bn_gamma, o_new)
            mid_same = np.array_equal(keep_mid, np.arange(b.c_mid))
            out_same = np.array_equal(keep_out, np.arange(b.c_out))
            k1 = _select_out(smap.remap_rows(p1.kernel), keep_mid, rng, init_scale)
            new[f"{b.id}.conv1"] = _select_bn(p1, keep_mid, k1, reset=not (smap.is_identity() and mid_same))
            k2 = _select_out(StreamMap(b.c_mid, sel=keep_mid).remap_rows(p2.kernel), keep_out, rng, init_scale)
            new[f"{b.id}.conv2"] = _select_bn(p2, keep_out, k2, reset=not (mid_same and out_same))

            old_skip = skip_matrix(b, params)
            if old_skip is None:
                old_skip = np.eye(b.c_out)
            s_new = smap.remap_rows(old_skip)[:, np.clip(keep_out, 0, None)]
            s_new[:, keep_out < 0] = 0.0
            b.c_mid, b.c_out = int(m_new), int(o_new)
            b.projection = smap.new_width != b.c_out
            if b.projection:
                new[f"{b.id}.proj"] = LayerParams(kernel=s_new[None, None])
            smap = StreamMap(len(p2.bn_gamma), sel=keep_out)
            kept.append(b)
        stage.blocks = kept

    hh, ww = arch.head_spatial()
    head = params["head"]
    w = head.kernel.reshape(hh, ww, smap.old_width, arch.n_classes)
    w = smap.remap_rows(w).reshape(-1, arch.n_classes)
    new["head"] = LayerParams(kernel=w, bias=head.bias.copy())
    new_arch.validate()
    check_params(new_arch, new)
    return new_arch, new


def remove_blocks(arch: Architecture, params: ParamStore, block_ids) -> Tuple[Architecture, ParamStore]:
    return apply_widths(arch, params, {bid: (0, 0) for bid in block_ids})
