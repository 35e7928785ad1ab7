"""Command-line entry point: search, train, sweep, export-dot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, with_seed
from .data import DatasetError, DatasetNotFound, load_named
from .pipeline import (RunHistory, TrainingVariant, regularization_sweep, run_resbuilder, select_best,
                       sweep_csv, train_phase)
from .serialize import ArchParseError, load_architecture, to_dot

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _dataset(cfg: RunConfig, data_arg):
    d = cfg.data
    synthetic = {"n_classes": d.synthetic_classes, "n_per_class": d.synthetic_per_class,
                 "size": d.synthetic_size, "channels": d.synthetic_channels, "noise": d.synthetic_noise,
                 "seed": d.synthetic_seed}
    return load_named(d.dataset, data_arg, d.n_train, d.n_test, d.preprocess, synthetic)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(name, cfg: RunConfig, dataset, init, out: Path) -> dict:
    return {"run_name": name, "config_hash": cfg.hash(), "dataset": dataset.name,
            "n_train": len(dataset.x_train), "n_test": len(dataset.x_test),
            "initial_architecture": str(init), "layout": {"history": "history.csv",
                                                          "steps": "step_<k>/arch.json",
                                                          "best": "best.json", "summary": "summary.json"}}


def cmd_search(args) -> int:
    cfg = with_seed(load_config(args.config), args.seed)
    dataset = _dataset(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    _write_json(out / "manifest.json", _manifest(out.name, cfg, dataset, args.init, out))
    init = args.init if args.init in ("minimal", "resnet18") else Path(args.init)
    history = run_resbuilder(init, dataset, cfg.train, out_dir=out)
    summary = {"dataset": dataset.name, "initial_architecture": str(args.init),
               "benchmark_noreg_ri": history.benchmark, "terminal": history.terminal,
               "n_records": len(history.records)}
    try:
        step, _ = select_best(history)
        rec = next(r for r in history.records if r.step_index == step)
        _write_json(out / "best.json", {"step_index": step, "arch_file": rec.arch_file, "flops": rec.flops,
                                        "noreg_acc": rec.noreg_acc})
        summary.update(best_step=step, best_noreg_acc=rec.noreg_acc, best_flops=rec.flops,
                       final_flops=history.records[-1].flops)
    except ValueError:
        pass
    _write_json(out / "summary.json", summary)
    if history.terminal:
        last = history.records[-1]
        _write_json(out / "error.json", {"error": history.terminal, "step_index": last.step_index,
                                         "message": last.detail.get("error", "")})
        print(f"search ended early: {history.terminal} at step {last.step_index}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(history.records)} records to {out / 'history.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        variant = TrainingVariant.parse(args.variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = with_seed(cfg, args.seed)
    dataset = _dataset(cfg, args.data)
    arch, params = load_architecture(args.arch, with_weights=variant != TrainingVariant.NOREG_RI)
    if variant == TrainingVariant.NOREG_WI and params is None:
        raise UsageError("NoRegWI needs an architecture with a weight sidecar")
    _, metrics = train_phase(arch, params, variant, dataset, cfg.train, seed=tuple(args.stream))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.update(arch_file=str(args.arch), config_hash=cfg.hash(), dataset=dataset.name)
    _write_json(out, metrics)
    print(f"{variant.value} accuracy {metrics['acc']:.4f} -> {out}")
    return EXIT_OK


def _strengths(text: str):
    try:
        vals = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"could not parse strengths {text!r}") from None
    if len(vals) < 2:
        raise UsageError("--strengths needs at least two values")
    return vals


def cmd_sweep(args) -> int:
    strengths = _strengths(args.strengths)
    cfg = with_seed(load_config(args.config), args.seed)
    dataset = _dataset(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = regularization_sweep(strengths, dataset, cfg.train, initial=args.init, out_dir=out)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    print(sweep_csv(rows), end="")
    return EXIT_OK


def cmd_export_dot(args) -> int:
    src, out = Path(args.src), Path(args.out)
    if src.is_dir() and (src / "history.csv").exists():
        history = RunHistory.from_csv((src / "history.csv").read_text())
        out.mkdir(parents=True, exist_ok=True)
        for rec in history.records:
            if not rec.arch_file:
                continue
            arch, _ = load_architecture(src / rec.arch_file, with_weights=False)
            fresh = rec.step_index if rec.event == "insert" else None
            (out / f"step_{rec.step_index:04d}.dot").write_text(to_dot(arch, fresh, f"step_{rec.step_index}"))
        print(f"wrote DOT files to {out}")
    else:
        arch, _ = load_architecture(src, with_weights=False)
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(to_dot(arch))
        print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resbuilder", description="Grow, prune and re-width ResNets under a FLOP budget.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every pipeline step")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run the full search loop")
    s.add_argument("config", help="key = value config file")
    s.add_argument("--data", help="dataset root (default: $RESBUILDER_DATA_DIR)")
    s.add_argument("--init", default="minimal", help="minimal, resnet18, or an architecture JSON file")
    s.add_argument("--seed", type=int, help="override rng_seed")
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train", help="train one architecture with one variant")
    t.add_argument("arch", help="architecture JSON file")
    t.add_argument("--variant", required=True, help="WithReg, NoRegRI or NoRegWI")
    t.add_argument("--data", help="dataset root (default: $RESBUILDER_DATA_DIR)")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--seed", type=int, help="override rng_seed")
    t.add_argument("--stream", type=int, nargs="*", default=[100, 0],
                   help="rng stream id; '100 0' matches the search's benchmark training")
    t.add_argument("--out", default="metrics.json", help="metrics JSON path")
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="one search per regularization strength")
    w.add_argument("config", help="key = value config file")
    w.add_argument("--strengths", required=True, help="comma-separated list, e.g. 1e-9,1e-8,1e-7")
    w.add_argument("--data", help="dataset root (default: $RESBUILDER_DATA_DIR)")
    w.add_argument("--init", default="minimal", help="minimal or resnet18")
    w.add_argument("--seed", type=int, help="override rng_seed")
    w.add_argument("--out", required=True, help="output directory")
    w.set_defaults(func=cmd_sweep)

    d = sub.add_parser("export-dot", help="render architectures as DOT")
    d.add_argument("src", help="architecture JSON file or run directory")
    d.add_argument("--out", required=True, help="DOT file, or directory when SRC is a run")
    d.set_defaults(func=cmd_export_dot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetNotFound) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArchParseError, DatasetError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out and args.command in ("search", "sweep"):
            Path(out).mkdir(parents=True, exist_ok=True)
            _write_json(Path(out) / "error.json", {"error": type(exc).__name__, "message": str(exc)})
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
