"""Architecture documents (JSON), weight sidecars and DOT renderings.

Weights live in a flat little-endian float64 file next to an index of
``(layer, tensor, shape, offset)`` entries, offsets counted in values.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .arch import Architecture, ParamStore, PoolStage, ResBlock
from .layers import LayerParams


class ArchParseError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def arch_to_dict(arch: Architecture) -> dict:
    return {
        "input_shape": list(arch.input_shape),
        "n_classes": arch.n_classes,
        "stem": {"k": arch.stem_kernel, "c_out": arch.stem_width},
        "stages": [
            {"blocks": [{"id": b.id, "c_mid": b.c_mid, "c_out": b.c_out,
                         "projection": b.projection, "birth_step": b.birth_step}
                        for b in s.blocks],
             "pool": s.pool}
            for s in arch.stages
        ],
        "head": {"units": arch.n_classes},
        "next_block_id": arch.next_block_id,
    }


def _get(doc, key, kind, path):
    if not isinstance(doc, dict) or key not in doc:
        raise ArchParseError(path, f"missing field {key!r}")
    val = doc[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ArchParseError(f"{path}.{key}", f"expected integer, got {val!r}")
    if kind is not int and not isinstance(val, kind):
        raise ArchParseError(f"{path}.{key}", f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def arch_from_dict(doc: dict) -> Architecture:
    shape = _get(doc, "input_shape", list, "$")
    if len(shape) != 3 or not all(isinstance(v, int) and v > 0 for v in shape):
        raise ArchParseError("$.input_shape", "expected three positive integers")
    n_classes = _get(doc, "n_classes", int, "$")
    stem = _get(doc, "stem", dict, "$")
    stages = []
    max_id = -1
    for si, sdoc in enumerate(_get(doc, "stages", list, "$")):
        path = f"$.stages[{si}]"
        blocks = []
        for bi, bdoc in enumerate(_get(sdoc, "blocks", list, path)):
            bpath = f"{path}.blocks[{bi}]"
            bid = _get(bdoc, "id", str, bpath)
            blocks.append(ResBlock(bid, _get(bdoc, "c_mid", int, bpath), _get(bdoc, "c_out", int, bpath),
                                   bool(bdoc.get("projection", False)), int(bdoc.get("birth_step", 0))))
            if bid.startswith("b") and bid[1:].isdigit():
                max_id = max(max_id, int(bid[1:]))
        stages.append(PoolStage(blocks, bool(_get(sdoc, "pool", bool, path))))
    head = doc.get("head", {"units": n_classes})
    if head.get("units", n_classes) != n_classes:
        raise ArchParseError("$.head.units", "must equal n_classes")
    arch = Architecture(tuple(shape), n_classes, _get(stem, "c_out", int, "$.stem"), stages,
                        stem_kernel=int(stem.get("k", 3)),
                        next_block_id=int(doc.get("next_block_id", max_id + 1)))
    supplied = [b.projection for b in arch.blocks]
    arch.fix_projections()
    if any("projection" in b for s in doc["stages"] for b in s["blocks"]):
        if supplied != [b.projection for b in arch.blocks]:
            raise ArchParseError("$.stages", "projection flags inconsistent with widths")
    try:
        arch.validate()
    except ValueError as exc:
        raise ArchParseError("$", str(exc)) from exc
    return arch


def dumps_arch(arch: Architecture) -> str:
    return json.dumps(arch_to_dict(arch), indent=2, sort_keys=True) + "\n"


def loads_arch(text: str) -> Architecture:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchParseError("$", f"invalid JSON: {exc}") from exc
    return arch_from_dict(doc)


def save_weights(params: ParamStore, path) -> dict:
    index, chunks, offset = [], [], 0
    for layer in sorted(params):
        for name, arr in params[layer].arrays().items():
            index.append({"layer": layer, "tensor": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").ravel())
            offset += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    Path(path).write_bytes(blob.astype("<f8").tobytes())
    return {"dtype": "<f8", "count": offset, "tensors": index}


def load_weights(path, index: dict) -> ParamStore:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if data.size != index["count"]:
        raise ArchParseError(str(path), f"expected {index['count']} values, found {data.size}")
    layers: dict = {}
    for i, entry in enumerate(index["tensors"]):
        n = int(np.prod(entry["shape"], dtype=np.int64))
        off = entry["offset"]
        if off + n > data.size:
            raise ArchParseError(f"tensors[{i}]", "extends past the end of the weight file")
        layers.setdefault(entry["layer"], {})[entry["tensor"]] = (
            data[off:off + n].astype(np.float64).reshape(entry["shape"]))
    return ParamStore({k: LayerParams(**v) for k, v in layers.items()})


def save_architecture(arch: Architecture, directory, params: Optional[ParamStore] = None) -> Path:
    """Write arch.json (and weights.bin + weights.json) into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "arch.json").write_text(dumps_arch(arch))
    if params is not None:
        index = save_weights(params, d / "weights.bin")
        (d / "weights.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return d / "arch.json"


def load_architecture(path, with_weights: bool = True) -> Tuple[Architecture, Optional[ParamStore]]:
    """Read an arch.json file (or a directory holding one) and optional weights."""
    p = Path(path)
    if p.is_dir():
        p = p / "arch.json"
    arch = loads_arch(p.read_text())
    params = None
    index = p.parent / "weights.json"
    if with_weights and index.exists():
        params = load_weights(p.parent / "weights.bin", json.loads(index.read_text()))
    return arch, params


# --- DOT -----------------------------------------------------------------------

DOT_STYLE = {
    "input": ("box", "lightgrey"),
    "conv": ("box", "gold"),
    "stem": ("box", "orange"),
    "fresh": ("box", "palegreen"),
    "proj": ("box", "khaki"),
    "add": ("circle", "white"),
    "pool": ("box", "tomato"),
    "dense": ("box", "violet"),
    "softmax": ("box", "plum"),
}


def to_dot(arch: Architecture, fresh_step: Optional[int] = None, name: str = "resnet") -> str:
    """One node per layer; blocks born at ``fresh_step`` are drawn green.

    Convolution labels end with their output width.
    """
    lines = [f"digraph {name} {{", "  rankdir=LR;", "  node [style=filled, fontname=Helvetica];"]
    edges = []

    def node(nid, label, kind):
        shape, color = DOT_STYLE[kind]
        lines.append(f'  {nid} [label="{label}", shape={shape}, fillcolor={color}];')

    h, w, c = arch.input_shape
    node("input", f"input\\n{h}x{w}x{c}", "input")
    node("stem", f"conv {arch.stem_kernel}x{arch.stem_kernel}\\n{arch.stem_width}", "stem")
    edges.append(("input", "stem"))
    prev = "stem"
    n_pool = 0
    for si, stage in enumerate(arch.stages):
        for b in stage.blocks:
            kind = "fresh" if fresh_step is not None and b.birth_step == fresh_step else "conv"
            c1, c2, plus = f"{b.id}_conv1", f"{b.id}_conv2", f"{b.id}_add"
            node(c1, f"conv 3x3\\n{b.c_mid}", kind)
            node(c2, f"conv 3x3\\n{b.c_out}", kind)
            node(plus, "+", "add")
            edges += [(prev, c1), (c1, c2), (c2, plus)]
            if b.projection:
                pj = f"{b.id}_proj"
                node(pj, f"proj 1x1\\n{b.c_out}", "proj")
                edges += [(prev, pj), (pj, plus)]
            else:
                edges.append((prev, plus))
            prev = plus
        if stage.pool:
            pid = f"pool{n_pool}"
            n_pool += 1
            node(pid, "maxpool 2x2", "pool")
            edges.append((prev, pid))
            prev = pid
    node("dense", f"dense\\n{arch.n_classes}", "dense")
    node("softmax", "softmax", "softmax")
    edges += [(prev, "dense"), ("dense", "softmax")]
    lines += [f"  {a} -> {b};" for a, b in edges]
    lines.append("}")
    return "\n".join(lines) + "\n"
