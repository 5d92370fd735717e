"""Skeleton-image scoring: binarisation, Euclidean distance, PCS and reports."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

THRESHOLDS = (25, 30, 40, 50)
STRICT, LOOSE = 30, 50


def binarize(image: np.ndarray, kind: str = "ground-truth", tau: float = 0.5) -> np.ndarray:
    """Ground truth: nonzero -> 1.  Prediction: ``> tau`` -> 1."""
    image = np.asarray(image)
    if kind in ("ground-truth", "gt"):
        return (image != 0).astype(np.uint8)
    if kind in ("prediction", "pred"):
        return (image > tau).astype(np.uint8)
    raise ValueError(f"unknown binarize kind {kind!r}")


def euclidean_distance(p: np.ndarray, g: np.ndarray) -> float:
    if np.shape(p) != np.shape(g):
        raise ValueError(f"shape mismatch: {np.shape(p)} vs {np.shape(g)}")
    diff = np.asarray(p, dtype=np.float64) - np.asarray(g, dtype=np.float64)
    return float(np.sqrt(np.sum(diff * diff)))


def distances(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Row-wise distances between stacks of binary images."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.shape != gts.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {gts.shape}")
    diff = (preds.reshape(len(preds), -1) != gts.reshape(len(gts), -1)).sum(axis=1)
    return np.sqrt(diff.astype(np.float64))


def pcs(preds, gts, theta: float) -> float:
    """Fraction of pairs whose distance is ``<= theta``."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if len(preds) == 0:
        raise ValueError("pcs of an empty set")
    return float(np.mean(distances(preds, gts) <= theta))


@dataclass
class SubjectScore:
    subject: int
    pcs: dict[int, float]  # theta -> percent
    mean_distance: float
    count: int
    is_target: bool = False


@dataclass
class PCSReport:
    rows: list[SubjectScore]
    overall: SubjectScore
    tau: float = 0.5
    thresholds: tuple[int, ...] = field(default=THRESHOLDS)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("subject,theta,pcs_percent,mean_distance,sample_count\n")
        for row in self.rows + [self.overall]:
            name = "all" if row is self.overall else str(row.subject)
            for th in self.thresholds:
                buf.write(f"{name},{th},{row.pcs[th]!r},{row.mean_distance!r},{row.count}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        names = [f"{r.subject}{'*' if r.is_target else ''}" for r in self.rows] + ["avg"]
        cells = self.rows + [self.overall]
        width = max(9, *(len(n) + 2 for n in names))
        lines = [f"PCS report (prediction threshold tau={self.tau}; * = target subject)"]
        lines.append("theta".ljust(12) + "".join(n.rjust(width) for n in names))
        for th in self.thresholds:
            tag = " strict" if th == STRICT else " loose" if th == LOOSE else ""
            label = f"PCS@{th}{tag}"
            lines.append(label.ljust(12) + "".join(f"{c.pcs[th]:.2f}%".rjust(width) for c in cells))
        lines.append("mean dist".ljust(12) + "".join(f"{c.mean_distance:.2f}".rjust(width) for c in cells))
        lines.append("samples".ljust(12) + "".join(str(c.count).rjust(width) for c in cells))
        return "\n".join(lines) + "\n"


def _score(subject, d: np.ndarray, thresholds, is_target=False) -> SubjectScore:
    return SubjectScore(
        subject=subject,
        pcs={th: 100.0 * float(np.mean(d <= th)) for th in thresholds},
        mean_distance=float(d.mean()),
        count=len(d),
        is_target=is_target,
    )


def report(preds, gts, subjects, target: int | None = None, known_subjects=None,
           tau: float = 0.5, thresholds=THRESHOLDS, binarized: bool = False) -> PCSReport:
    """Per-subject and pooled PCS percentages and mean distances.

    ``preds`` are generator outputs (binarised at ``tau`` unless
    ``binarized``), ``gts`` raw skeleton images.  Rows list the target first,
    then the remaining subjects in ascending id.  Pooled numbers are computed
    over all samples, i.e. the sample-weighted mean of the rows.
    """
    preds, gts = np.asarray(preds), np.asarray(gts)
    subjects = np.asarray(subjects)
    if not (len(preds) == len(gts) == len(subjects)):
        raise ValueError("preds, gts and subjects must be aligned")
    if known_subjects is not None:
        unknown = sorted(set(subjects.tolist()) - set(known_subjects))
        if unknown:
            raise ValueError(f"unknown subject ids {unknown}")
    pb = preds if binarized else binarize(preds, "prediction", tau)
    d = distances(pb, binarize(gts, "ground-truth"))
    ids = sorted(set(subjects.tolist()), key=lambda s: (s != target, s))
    rows = [_score(s, d[subjects == s], thresholds, s == target) for s in ids]
    return PCSReport(rows, _score("all", d, thresholds), tau, tuple(thresholds))
