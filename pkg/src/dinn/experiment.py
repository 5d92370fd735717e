"""Adversarial-vs-ablation comparison on the synthetic data.

For each seed the dataset and the model are drawn from that seed, pre-training
runs once, and the run then branches into the adversarial schedule and the
``lam = 0`` ablation.  Branching is exact: both schedules use ``lam = 0`` for
the pre-training epochs, so the shared prefix is what either run would have
computed on its own.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import pcs, synth
from .training import LossRecord, Trainer, TrainConfig, predict_images

log = logging.getLogger(__name__)


@dataclass
class RunSummary:
    history: list[LossRecord]
    report: pcs.PCSReport  # target first, then held-out sources

    @property
    def pretrain_peak(self) -> float:
        return max(r.disc_acc for r in self.history if r.stage == "pretrain")

    @property
    def final_acc(self) -> float:
        return self.history[-1].disc_acc

    @property
    def target(self) -> pcs.SubjectScore:
        return next(r for r in self.report.rows if r.is_target)


@dataclass
class SeedOutcome:
    seed: int
    dinn: RunSummary
    ablation: RunSummary


def evaluate(trainer: Trainer, tau: float = 0.5) -> pcs.PCSReport:
    ds, split = trainer.dataset, trainer.split
    idx = np.concatenate([split.test_target, split.test_source])
    preds = predict_images(trainer.params, ds.csi[idx])
    return pcs.report(preds, ds.skeleton[idx], ds.subject[idx], target=ds.target_id,
                      known_subjects=range(ds.k_total), tau=tau)


def pretrained(seed: int, frames: int = 600, **config) -> Trainer:
    ds, split = synth.build_dataset(synth.make_subjects(seed), frames, seed)
    trainer = Trainer(ds, split, TrainConfig(seed=seed, **config))
    trainer.run(until=trainer.config.epochs_pretrain)
    return trainer


def compare(seed: int, frames: int = 600, shared: Trainer | None = None, **config) -> SeedOutcome:
    """Adversarial and ablation runs that share one pre-training."""
    shared = shared or pretrained(seed, frames, **config)
    out = {}
    for name, overrides in (("dinn", {}), ("ablation", {"ablation": True})):
        branch = shared.copy(**overrides)
        branch.run()
        out[name] = RunSummary(branch.history, evaluate(branch))
        log.info("seed %d %s: final disc_acc %.3f, target mean distance %.2f",
                 seed, name, out[name].final_acc, out[name].target.mean_distance)
    return SeedOutcome(seed, out["dinn"], out["ablation"])


def theta_star(a: dict[int, float], b: dict[int, float]) -> int | None:
    """Smallest threshold at which either curve is nonzero."""
    for th in sorted(a):
        if a[th] > 0 or b[th] > 0:
            return th
    return None


def curve(score: pcs.SubjectScore) -> str:
    return " ".join(f"PCS@{th}={v:.2f}%" for th, v in sorted(score.pcs.items())) + \
        f" mean_dist={score.mean_distance:.3f}"
