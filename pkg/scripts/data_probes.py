#!/usr/bin/env python3
"""Linear probes on the raw synthetic CSI: subject separability and pose recoverability.

Also reports the PCS of trivial predictors (blank image, per-pixel mean
skeleton), which bound how informative PCS is with 1-px skeletons.
"""

import argparse

import numpy as np
from sklearn.linear_model import LogisticRegression, Ridge

from dinn import pcs, synth


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--frames", type=int, default=600)
    args = ap.parse_args()
    for seed in args.seeds:
        ds, split = synth.build_dataset(synth.make_subjects(seed), args.frames, seed)
        x = lambda idx: ds.csi[idx].reshape(len(idx), -1)
        clf = LogisticRegression(max_iter=2000).fit(x(split.train), ds.subject[split.train])
        acc = clf.score(x(split.test_source), ds.subject[split.test_source])
        small = lambda idx: ds.skeleton[idx, :, :, 0].reshape(len(idx), 15, 8, 20, 8).mean(axis=(2, 4)).reshape(len(idx), -1)
        ridge = Ridge(alpha=10.0).fit(x(split.train), small(split.train))
        corr = {}
        for name, idx in (("source", split.test_source), ("target", split.test_target)):
            corr[name] = np.corrcoef(ridge.predict(x(idx)).ravel(), small(idx).ravel())[0, 1]
        pixels = ds.skeleton.reshape(len(ds), -1).sum(axis=1)
        gt = ds.skeleton[split.test_target]
        blank = pcs.report(np.zeros(gt.shape), gt, ds.subject[split.test_target], binarized=True).overall
        mean_img = ds.skeleton[split.train].mean(axis=0)
        avg = pcs.report(np.broadcast_to(mean_img, gt.shape), gt, ds.subject[split.test_target], tau=0.5).overall
        print(f"seed {seed}: subject probe acc {acc:.3f}; ridge corr source {corr['source']:.3f} "
              f"target {corr['target']:.3f}; skeleton pixels {pixels.min()}-{pixels.max()}")
        print(f"  target PCS of a blank prediction: " + " ".join(f"@{t}={v:.1f}%" for t, v in blank.pcs.items())
              + f" mean_dist={blank.mean_distance:.2f}")
        print(f"  target PCS of the mean training skeleton: " + " ".join(f"@{t}={v:.1f}%" for t, v in avg.pcs.items())
              + f" mean_dist={avg.mean_distance:.2f}")


if __name__ == "__main__":
    main()
