"""Ranking metrics: all-points average precision and mean AP.

The ranking is fully deterministic: images sort by descending score, and
equal scores break ties by ascending image index (original row order).
AP is the all-points form

    AP = (1 / n_pos) * sum over positives of (hits so far) / rank,

with precision terms accumulated in rank order.  A class with no
positive labels has no defined AP; that is an error for a single class
and a recorded exclusion in the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ScoreBundle

__all__ = [
    "UndefinedAPError",
    "EvalReport",
    "ranking_order",
    "average_precision",
    "mean_average_precision",
    "compare_methods",
]


class UndefinedAPError(ValueError):
    """Average precision requested for a label vector with no positives."""


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorting scores descending, ties by ascending image index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """All-points AP of one score column against binary labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    order = ranking_order(scores)
    ranked = labels[order].astype(bool)
    n_pos = int(ranked.sum())
    if n_pos == 0:
        raise UndefinedAPError("no positive labels; AP undefined")
    hits = np.cumsum(ranked)
    ranks = np.arange(1, scores.shape[0] + 1)
    precisions = hits[ranked] / ranks[ranked]
    return float(np.sum(precisions) / n_pos)


@dataclass(frozen=True)
class EvalReport:
    """Per-class APs plus their mean; classes without positives are skipped."""

    per_class_ap: tuple[float | None, ...]
    mean_ap: float
    skipped_classes: tuple[int, ...]
    method: str = ""
    dataset: str = ""

    def defined_aps(self) -> list[float]:
        return [a for a in self.per_class_ap if a is not None]


def mean_average_precision(
    scores: np.ndarray, labels: np.ndarray, method: str = "", dataset: str = ""
) -> EvalReport:
    """Column-wise AP over an images-by-classes score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-shape matrices")
    aps: list[float | None] = []
    skipped: list[int] = []
    for j in range(scores.shape[1]):
        try:
            aps.append(average_precision(scores[:, j], labels[:, j]))
        except UndefinedAPError:
            aps.append(None)
            skipped.append(j)
    defined = [a for a in aps if a is not None]
    if not defined:
        raise UndefinedAPError("no class has positive labels; mean AP undefined")
    return EvalReport(
        per_class_ap=tuple(aps),
        mean_ap=float(np.mean(defined)),
        skipped_classes=tuple(skipped),
        method=method,
        dataset=dataset,
    )


def compare_methods(
    bundle: ScoreBundle,
    strategies: tuple[str, ...] = ("singleton", "kmax:1", "kmax:2", "meangeq:2", "maxvariance"),
    dataset: str = "",
) -> list[EvalReport]:
    """Evaluate several fusion strategies on one labeled bundle.

    Each non-singleton strategy is run both without and with the merge
    step (method labels get a ``+merge`` suffix).  Requires labels.
    """
    from .fusion import sparc_pipeline  # local import; fusion imports are heavier

    if bundle.labels is None:
        raise ValueError("compare_methods requires a labeled bundle")
    reports: list[EvalReport] = []
    for name in strategies:
        variants = ((False, name),) if name == "singleton" else ((False, name), (True, name + "+merge"))
        for merge_fused, label in variants:
            refined = sparc_pipeline(bundle, name, merge_fused=merge_fused)
            reports.append(
                mean_average_precision(refined, bundle.labels.values, method=label, dataset=dataset)
            )
    return reports
