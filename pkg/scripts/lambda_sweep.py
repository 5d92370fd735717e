#!/usr/bin/env python3
"""How strong must the adversary be?  Branch one pre-training into several lam values.

Also prints, at the end of pre-training, the norm of ``lam * dLd/dtheta_f``
relative to ``dLg/dtheta_f`` for a few feature-extractor tensors: the pixel-summed
generation loss dwarfs the class-summed domain loss, so the adversarial term
only matters once lam makes up that scale gap.

    python3 scripts/lambda_sweep.py --seed 0 --lambdas 0.1 1e2 1e4 1e6 --epochs 3
"""

import argparse
import logging

import numpy as np
from threadpoolctl import threadpool_limits

from dinn import tensor as T
from dinn.experiment import pretrained
from dinn.training import compute_gradients


def gradient_scale(trainer, lam, batches=3, seed=0):
    ds, split = trainer.dataset, trainer.split
    rng = np.random.default_rng(seed)
    for b in range(batches):
        idx = np.sort(rng.choice(split.train, trainer.config.batch, replace=False))
        batch = (T.Tensor(ds.csi[idx]), ds.skeleton[idx].astype(np.float32), ds.domain[idx].astype(np.float32))
        plain = compute_gradients(batch, trainer.params, 0.0)
        mixed = compute_gradients(batch, trainer.params, lam)
        print(f"batch {b}: L_g={plain.loss_g:.2f} L_d={plain.loss_d:.3e}")
        for name in ("conv1.kernel", "conv6.kernel", "se.expand.weights"):
            g = np.linalg.norm(plain.feature[name])
            d = np.linalg.norm(mixed.feature[name] - plain.feature[name])
            print(f"  {name:18s} |dLg|={g:.3e}  |lam dLd|={d:.3e}  ratio={d / g:.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.1, 1e2, 1e4, 1e6])
    ap.add_argument("--epochs", type=int, default=3, help="adversarial epochs per lambda")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    with threadpool_limits(limits=1):
        shared = pretrained(args.seed, epochs_adversarial=args.epochs)
        print("pre-training disc_acc:", " ".join(f"{r.disc_acc:.3f}" for r in shared.history))
        gradient_scale(shared, 0.1)
        for lam in args.lambdas:
            run = shared.copy(lam=lam)
            run.run()
            tail = run.history[shared.epoch:]
            print(f"lam={lam:g}: " + "; ".join(
                f"epoch {r.epoch} L_g={r.loss_g:.1f} L_d={r.loss_d:.3e} disc_acc={r.disc_acc:.3f}" for r in tail))


if __name__ == "__main__":
    main()
