"""The search loop: insert -> train with penalties -> prune, then a morph routine."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .arch import Architecture, ParamStore, flops, forward, forward_graph, init_params, new_minimal, resnet18
from .autodiff import NonFiniteGradientError, Tensor, scale, square_sum, total
from .data import Dataset, augment, iterate_batches
from .insertion import insert_block, pick_insertion_point
from .layerlasso import lasso_penalty, prune_blocks
from .layers import softmax_cross_entropy
from .morphnet import BudgetInfeasibleError, MorphConfig, morph_routine
from .optim import AdamState, adam_step
from .serialize import arch_from_dict, arch_to_dict, load_architecture, save_architecture

log = logging.getLogger(__name__)

NOREG_SCHEDULES = ("every_edit", "morph_only", "never")


@dataclass
class TrainConfig:
    lambda_m: float = 1e-7
    lambda_lasso: float = 1e-8
    lambda_l2: float = 1e-5
    tau_m: float = 1e-2
    tau_lasso: float = 1e-3
    zeta: float = 1e8
    n_lambda: int = 4
    n_m: int = 7
    theta_init: float = 1e-2
    epochs_per_phase: int = 8
    batch_size: int = 128
    learning_rate: float = 1e-3
    augmentation: bool = True
    rng_seed: int = 0
    bn_momentum: float = 0.99
    stem_width: int = 16
    n_stages: int = 2
    noreg_schedule: str = "every_edit"
    lasso_normalized: bool = False
    eval_batch_size: int = 500
    save_weights: bool = True

    def __post_init__(self):
        if self.noreg_schedule not in NOREG_SCHEDULES:
            raise ValueError(f"noreg_schedule must be one of {NOREG_SCHEDULES}")
        for name in ("lambda_m", "lambda_lasso", "lambda_l2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("tau_m", "tau_lasso", "zeta", "theta_init", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_lambda", "n_m", "epochs_per_phase", "batch_size", "stem_width", "n_stages"):
            if getattr(self, name) < 1 and not (name == "epochs_per_phase" and self.epochs_per_phase == 0):
                raise ValueError(f"{name} must be at least 1")

    def morph(self) -> MorphConfig:
        return MorphConfig(self.lambda_m, self.tau_m, self.zeta, self.n_m)


class TrainingVariant(str, Enum):
    WITH_REG = "WithReg"
    NOREG_RI = "NoRegRI"
    NOREG_WI = "NoRegWI"

    @classmethod
    def parse(cls, text: str) -> "TrainingVariant":
        for v in cls:
            if v.value.lower() == text.lower():
                return v
        raise ValueError(f"unknown variant {text!r}; choose from {[v.value for v in cls]}")


class TrainingDiverged(RuntimeError):
    pass


# --- training ----------------------------------------------------------------

def l2_penalty(params: ParamStore, tensors) -> Tensor:
    return total(square_sum(tensors[(layer, "kernel")]) for layer in params)


def total_loss(arch: Architecture, params: ParamStore, x, y, tensors, lambda_m=0.0, lambda_lasso=0.0,
               lambda_l2=0.0, tau_m=1e-2, mode="train", momentum=0.99) -> Tuple[Tensor, Tensor]:
    """Cross entropy plus the weighted penalties; returns (total, cross entropy)."""
    from .morphnet import morph_penalty

    logits = forward_graph(arch, params, x, mode=mode, tensors=tensors, momentum=momentum)
    ce = softmax_cross_entropy(logits, y)
    terms = [ce]
    if lambda_lasso:
        terms.append(scale(lasso_penalty(arch, params, tensors), lambda_lasso))
    if lambda_m:
        terms.append(scale(morph_penalty(arch, params, tau_m, tensors), lambda_m))
    if lambda_l2:
        terms.append(scale(l2_penalty(params, tensors), lambda_l2))
    return total(terms), ce


def accuracy(arch: Architecture, params: ParamStore, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> float:
    if len(x) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(x), batch_size):
        logits = forward(arch, params, x[start:start + batch_size], mode="infer")
        correct += int(np.sum(logits.argmax(axis=1) == y[start:start + batch_size]))
    return correct / len(x)


def variant_lambdas(variant: TrainingVariant, config: TrainConfig) -> Dict[str, float]:
    reg = variant == TrainingVariant.WITH_REG
    return {"lambda_m": config.lambda_m if reg else 0.0,
            "lambda_lasso": config.lambda_lasso if reg else 0.0,
            "lambda_l2": config.lambda_l2}


def train_phase(arch: Architecture, params: Optional[ParamStore], variant: TrainingVariant, data: Dataset,
                config: TrainConfig, seed: Sequence[int] = (0,)):
    """Run ``epochs_per_phase`` epochs of Adam on the variant's loss.

    NoRegRI ignores ``params`` and starts from a fresh initialisation. The
    input store is never mutated. Returns (params, metrics).
    """
    variant = TrainingVariant(variant)
    rng = np.random.default_rng([config.rng_seed, *seed])
    if variant == TrainingVariant.NOREG_RI or params is None:
        params = init_params(arch, rng)
    else:
        params = params.copy()
    lambdas = variant_lambdas(variant, config)
    state = AdamState(lr=config.learning_rate)
    acc_start = accuracy(arch, params, data.x_test, data.y_test, config.eval_batch_size)
    losses = []
    for epoch in range(config.epochs_per_phase):
        epoch_loss, n_seen = 0.0, 0
        for idx in iterate_batches(len(data.x_train), config.batch_size, rng):
            xb = data.x_train[idx]
            if config.augmentation:
                xb = augment(xb, rng)
            tensors = params.leaves()
            loss, ce = total_loss(arch, params, xb, data.y_train[idx], tensors, tau_m=config.tau_m,
                                  momentum=config.bn_momentum, **lambdas)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"{variant.value}: non-finite loss at epoch {epoch} (ce={ce.item()})")
            try:
                loss.backward()
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(f"{variant.value}: {exc}") from exc
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            adam_step(params.trainable(), grads, state)
            epoch_loss += loss.item() * len(idx)
            n_seen += len(idx)
        losses.append(epoch_loss / max(n_seen, 1))
    acc = accuracy(arch, params, data.x_test, data.y_test, config.eval_batch_size)
    metrics = {"variant": variant.value, "acc_start": acc_start, "acc": acc, "loss_curve": losses,
               "epochs": config.epochs_per_phase, "steps": state.step}
    return params, metrics


# --- history -------------------------------------------------------------------

CSV_COLUMNS = ("step_index", "event", "flops", "depth", "max_channels_first_stage",
               "acc_withreg", "acc_noreg_ri", "acc_noreg_wi", "arch_file", "detail")


@dataclass
class HistoryRecord:
    step_index: int
    event: str
    flops: int
    depth: int
    max_channels_first_stage: int
    acc_withreg: Optional[float] = None
    acc_noreg_ri: Optional[float] = None
    acc_noreg_wi: Optional[float] = None
    arch_file: str = ""
    detail: dict = field(default_factory=dict)
    arch: Optional[Architecture] = field(default=None, repr=False, compare=False)

    @property
    def noreg_acc(self) -> Optional[float]:
        vals = [v for v in (self.acc_noreg_ri, self.acc_noreg_wi) if v is not None]
        return max(vals) if vals else None


def max_channels_first_stage(arch: Architecture) -> int:
    blocks = arch.stages[0].blocks if arch.stages else []
    return max([arch.stem_width] + [max(b.c_mid, b.c_out) for b in blocks]) if blocks else arch.stem_width


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class RunHistory:
    records: List[HistoryRecord] = field(default_factory=list)
    terminal: Optional[str] = None

    def append(self, rec: HistoryRecord) -> None:
        if self.records and rec.step_index <= self.records[-1].step_index:
            raise ValueError("step_index must be strictly increasing")
        self.records.append(rec)

    @property
    def benchmark(self) -> Optional[float]:
        """NoRegRI accuracy of the initial architecture."""
        return self.records[0].acc_noreg_ri if self.records else None

    def events(self, kind: str) -> List[HistoryRecord]:
        return [r for r in self.records if r.event == kind]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r.step_index), r.event, _fmt(r.flops), _fmt(r.depth),
                        _fmt(r.max_channels_first_stage), _fmt(r.acc_withreg), _fmt(r.acc_noreg_ri),
                        _fmt(r.acc_noreg_wi), r.arch_file,
                        json.dumps(_jsonable(r.detail), sort_keys=True, separators=(",", ":"))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, root: Optional[Path] = None) -> "RunHistory":
        hist = cls()
        opt = lambda s: float(s) if s else None  # noqa: E731
        for row in csv.DictReader(io.StringIO(text)):
            rec = HistoryRecord(int(row["step_index"]), row["event"], int(row["flops"]), int(row["depth"]),
                                int(row["max_channels_first_stage"]), opt(row["acc_withreg"]),
                                opt(row["acc_noreg_ri"]), opt(row["acc_noreg_wi"]), row["arch_file"],
                                json.loads(row["detail"]))
            if root is not None and rec.arch_file:
                rec.arch, _ = load_architecture(root / rec.arch_file, with_weights=False)
            hist.records.append(rec)
        if hist.records and hist.records[-1].event in ("diverged", "infeasible"):
            hist.terminal = hist.records[-1].event
        return hist


# --- the search ----------------------------------------------------------------

def initial_architecture(initial: Union[str, Architecture, Path], data: Dataset, config: TrainConfig):
    if isinstance(initial, Architecture):
        return initial.copy(), None
    if initial == "minimal":
        return new_minimal(data.input_shape, data.n_classes, config.stem_width, config.n_stages), None
    if initial == "resnet18":
        return resnet18(data.input_shape, data.n_classes), None
    arch, params = load_architecture(initial)
    if tuple(arch.input_shape) != tuple(data.input_shape) or arch.n_classes != data.n_classes:
        raise ValueError("architecture file does not match the dataset")
    return arch, params


class _Run:
    def __init__(self, data: Dataset, config: TrainConfig, out_dir: Optional[Path]):
        self.data, self.config, self.out_dir = data, config, out_dir
        self.history = RunHistory()
        self.step = 0

    def record(self, event: str, arch: Architecture, params: Optional[ParamStore], detail: dict,
               acc_withreg: Optional[float] = None, noreg: bool = True) -> HistoryRecord:
        rec = HistoryRecord(self.step, event, flops(arch), arch.depth, max_channels_first_stage(arch),
                            acc_withreg=acc_withreg, detail=_jsonable(detail), arch=arch.copy())
        if noreg:
            _, m_ri = train_phase(arch, None, TrainingVariant.NOREG_RI, self.data, self.config,
                                  seed=(100, self.step))
            rec.acc_noreg_ri = m_ri["acc"]
            if params is not None:
                _, m_wi = train_phase(arch, params, TrainingVariant.NOREG_WI, self.data, self.config,
                                      seed=(200, self.step))
                rec.acc_noreg_wi = m_wi["acc"]
                rec.detail["noreg_wi_acc_start"] = m_wi["acc_start"]
        if self.out_dir is not None:
            rel = f"step_{self.step:04d}"
            save_architecture(arch, self.out_dir / rel, params if self.config.save_weights else None)
            rec.arch_file = f"{rel}/arch.json"
        self.history.append(rec)
        log.info("step %d %s flops=%d depth=%d withreg=%s noreg=%s", rec.step_index, event, rec.flops,
                 rec.depth, rec.acc_withreg, rec.noreg_acc)
        self.step += 1
        return rec

    def terminal(self, event: str, arch: Architecture, message: str) -> None:
        self.history.terminal = event
        self.record(event, arch, None, {"error": message}, noreg=False)


def run_resbuilder(initial: Union[str, Architecture, Path], data: Dataset, config: TrainConfig,
                   out_dir=None, initial_params: Optional[ParamStore] = None) -> RunHistory:
    """Run n_M rounds of (n_Lambda x [insert, train WithReg, prune]) + morph routine.

    Divergence and budget infeasibility end the run with a terminal record.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    run = _Run(data, config, out)
    arch, loaded = initial_architecture(initial, data, config)
    params = initial_params or loaded or init_params(arch, np.random.default_rng([config.rng_seed, 0]))
    insert_rng = np.random.default_rng([config.rng_seed, 1])
    every = config.noreg_schedule == "every_edit"
    run.record("init", arch, params, {"source": initial if isinstance(initial, str) else "architecture"},
               noreg=config.noreg_schedule != "never")
    try:
        for m in range(config.n_m):
            for _ in range(config.n_lambda):
                point = pick_insertion_point(arch, insert_rng)
                arch, params, event = insert_block(arch, params, point, insert_rng, config.theta_init, run.step)
                params, metrics = train_phase(arch, params, TrainingVariant.WITH_REG, data, config,
                                              seed=(300, run.step))
                run.record("insert", arch, params, {**event, "morph_round": m, "withreg_loss": metrics["loss_curve"]},
                           acc_withreg=metrics["acc"], noreg=every)
                depth_before = arch.depth
                arch, params, removed = prune_blocks(arch, params, config.tau_lasso, config.lasso_normalized,
                                                     step=run.step)
                if removed:
                    acc = accuracy(arch, params, data.x_test, data.y_test, config.eval_batch_size)
                    run.record("remove", arch, params,
                               {"removed": removed, "collapsed": depth_before > 0 and arch.depth == 0},
                               acc_withreg=acc, noreg=every)
            arch, params, mrec = morph_routine(arch, params, config.morph(),
                                               rng=np.random.default_rng([config.rng_seed, 400, run.step]),
                                               init_scale=config.theta_init, step=run.step)
            acc = accuracy(arch, params, data.x_test, data.y_test, config.eval_batch_size)
            run.record("morph", arch, params, {**mrec, "morph_round": m}, acc_withreg=acc,
                       noreg=config.noreg_schedule != "never")
    except TrainingDiverged as exc:
        run.terminal("diverged", arch, str(exc))
    except BudgetInfeasibleError as exc:
        run.terminal("infeasible", arch, str(exc))
    if out is not None:
        run.history.write_csv(out / "history.csv")
    return run.history


def select_best(history: RunHistory) -> Tuple[int, Optional[Architecture]]:
    """Step with the highest NoReg accuracy; ties -> fewer FLOPs -> earlier step."""
    cands = [r for r in history.records if r.noreg_acc is not None]
    if not cands:
        raise ValueError("history has no record with a NoReg accuracy")
    best = min(cands, key=lambda r: (-r.noreg_acc, r.flops, r.step_index))
    return best.step_index, best.arch


def removal_position_stats(history: RunHistory) -> dict:
    positions = [item["relative_position"] for r in history.events("remove") for item in r.detail["removed"]]
    quartiles = np.percentile(positions, [25, 50, 75]).tolist() if positions else []
    hist, _ = np.histogram(positions, bins=10, range=(0.0, 1.0))
    return {"positions": positions, "count": len(positions), "quartiles": quartiles,
            "histogram": hist.tolist()}


def collapsed(history: RunHistory) -> bool:
    return any(r.detail.get("collapsed") for r in history.records if r.event in ("morph", "remove"))


@dataclass
class SweepRow:
    strength: float
    flops: int
    flops_final: int
    acc_withreg: Optional[float]
    collapsed: bool


def regularization_sweep(strengths: Sequence[float], data: Dataset, config: TrainConfig,
                         initial="minimal", out_dir=None) -> List[SweepRow]:
    """One search per strength with lambda_M = lambda_Lambda = s and lambda_0 = 0.

    ``flops`` is the cost of the regularised network as pruned by the last
    morph routine (before re-expansion to the budget); ``flops_final`` is the
    cost after expansion.
    """
    if len(strengths) < 2:
        raise ValueError("a sweep needs at least two strengths")
    rows = []
    for s in strengths:
        cfg = replace(config, lambda_m=float(s), lambda_lasso=float(s), lambda_l2=0.0, noreg_schedule="never")
        sub = None if out_dir is None else Path(out_dir) / f"strength_{s:g}"
        hist = run_resbuilder(initial, data, cfg, out_dir=sub)
        morphs = hist.events("morph")
        trained = [r.acc_withreg for r in hist.records if r.event == "insert"]
        rows.append(SweepRow(float(s), morphs[-1].detail["flops_shrunk"] if morphs else hist.records[-1].flops,
                             hist.records[-1].flops, trained[-1] if trained else None, collapsed(hist)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s", "flops", "flops_final", "acc", "collapsed"])
    for r in rows:
        w.writerow([repr(r.strength), r.flops, r.flops_final, _fmt(r.acc_withreg), int(r.collapsed)])
    return buf.getvalue()
