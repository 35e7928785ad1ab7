"""Regularization sweep on synthetic blobs: pruned FLOPs and collapse per strength."""
import argparse

import numpy as np

from resbuilder.data import synthetic_blobs
from resbuilder.pipeline import TrainConfig, regularization_sweep, sweep_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--strengths", default="0,1e-9,1e-8,1e-7,1e-5,1e-3")
    ap.add_argument("--classes", type=int, default=2)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--epochs", type=int, default=80)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--out", default=None, help="keep per-strength run directories here")
    args = ap.parse_args()

    data = synthetic_blobs(args.classes, 64, size=12, rng=np.random.default_rng(0), noise=args.noise)
    cfg = TrainConfig(epochs_per_phase=args.epochs, learning_rate=args.lr, batch_size=8, n_m=2, n_lambda=2,
                      stem_width=4, zeta=2e5, bn_momentum=0.9, augmentation=False)
    rows = regularization_sweep([float(s) for s in args.strengths.split(",")], data, cfg, out_dir=args.out)
    print(sweep_csv(rows), end="")


if __name__ == "__main__":
    main()
