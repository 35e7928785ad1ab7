"""Accuracy right after inserting a block, as a function of the initial weight scale.

Trains the minimal net on the MNIST sample, then inserts one block per stage
at several theta_init values and reports the immediate accuracy change and
the accuracy after one training phase.
"""
import argparse
from dataclasses import replace

import numpy as np

from resbuilder.arch import new_minimal
from resbuilder.data import load_named
from resbuilder.insertion import insert_block
from resbuilder.pipeline import TrainConfig, TrainingVariant, accuracy, train_phase


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--thetas", default="1e-4,1e-3,1e-2,1e-1,1")
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--pretrain-epochs", type=int, default=5)
    args = ap.parse_args()

    data = load_named("mnist_bundled")
    cfg = TrainConfig(epochs_per_phase=args.epochs, batch_size=64, bn_momentum=0.9, augmentation=False)
    arch = new_minimal(data.input_shape, 10, 16)
    params, m = train_phase(arch, None, TrainingVariant.NOREG_RI, data,
                            replace(cfg, epochs_per_phase=args.pretrain_epochs))
    acc0 = m["acc"]
    print(f"trained minimal net: {acc0:.4f}")
    print(f"{'theta':>8} {'stage':>5} {'after insert':>12} {'after phase':>11}")
    for theta in (float(t) for t in args.thetas.split(",")):
        for stage in range(len(arch.stages)):
            a2, p2, _ = insert_block(arch, params, (stage, 0), np.random.default_rng([7, stage]), theta_init=theta)
            acc_ins = accuracy(a2, p2, data.x_test, data.y_test)
            _, m2 = train_phase(a2, p2, TrainingVariant.WITH_REG, data, cfg, seed=(300, stage))
            print(f"{theta:>8g} {stage:>5} {acc_ins:>12.4f} {m2['acc']:>11.4f}")


if __name__ == "__main__":
    main()
