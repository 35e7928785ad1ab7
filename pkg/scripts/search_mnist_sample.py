"""Minimal-start search on the 5k-digit MNIST sample; prints the benchmark and best step.

    python scripts/search_mnist_sample.py --out runs/mnist_sample --epochs 2
"""
import argparse
import time

from resbuilder.data import load_named
from resbuilder.pipeline import TrainConfig, run_resbuilder, select_best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/mnist_sample")
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--n-m", type=int, default=3)
    ap.add_argument("--n-lambda", type=int, default=2)
    ap.add_argument("--zeta", type=float, default=1e7)
    ap.add_argument("--noreg", default="morph_only", choices=["every_edit", "morph_only", "never"])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = load_named("mnist_bundled")
    cfg = TrainConfig(epochs_per_phase=args.epochs, n_m=args.n_m, n_lambda=args.n_lambda, zeta=args.zeta,
                      batch_size=64, bn_momentum=0.9, noreg_schedule=args.noreg, rng_seed=args.seed)
    start = time.perf_counter()
    hist = run_resbuilder("minimal", data, cfg, out_dir=args.out)
    minutes = (time.perf_counter() - start) / 60

    print(f"{'step':>4} {'event':<8} {'flops':>10} {'depth':>5} {'withreg':>8} {'noreg':>8}")
    for r in hist.records:
        wr = f"{r.acc_withreg:.4f}" if r.acc_withreg is not None else "-"
        nr = f"{r.noreg_acc:.4f}" if r.noreg_acc is not None else "-"
        print(f"{r.step_index:>4} {r.event:<8} {r.flops:>10} {r.depth:>5} {wr:>8} {nr:>8}")
    step, _ = select_best(hist)
    best = hist.records[step]
    print(f"benchmark {hist.benchmark:.4f}  best step {step} noreg {best.noreg_acc:.4f} "
          f"({100 * (best.noreg_acc - hist.benchmark):+.2f}pt)  {minutes:.1f} min")


if __name__ == "__main__":
    main()
