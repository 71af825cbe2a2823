"""Rank fusion of debiased compound scores into per-class refined scores.

For a class ``i``, collect the debiased compound columns whose prompts
mention ``i`` and sort each image's values descending: the k-th column of
the result is the k-th largest compound evidence for that class on that
image (an order statistic).  Fusion turns that table, together with the
debiased singleton column, into a single refined column; strategies:

``maxvariance``
    project ``[singleton | order stats]`` onto its maximum-variance
    direction (leading eigenvector of the feature covariance, unit norm).
``kmax:<k>``
    take the k-th largest compound score alone (``kmax:2`` is the
    "second max" that is robust to one spurious co-occurrence hit).
``meangeq:<K>``
    average the K-th largest through the smallest.
``singleton``
    pass the debiased singleton column through unchanged.

Unless disabled, the fused auxiliary signal is then merged additively
with the debiased singleton column, so compound evidence refines rather
than replaces the direct score.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import PromptKind, PromptSpec, ScoreBundle, ScoreMatrix
from .debias import debias_bundle

__all__ = [
    "NoCompoundPromptsError",
    "DegenerateCovarianceError",
    "OrderStatTable",
    "FusionWeights",
    "FusionStrategy",
    "parse_strategy",
    "order_statistics",
    "max_variance_weights",
    "fuse_max_variance",
    "fuse_kmax",
    "fuse_mean_geq_k",
    "merge",
    "sparc_pipeline",
    "STRATEGY_NAMES",
]

STRATEGY_NAMES = ("maxvariance", "kmax", "meangeq", "singleton")

POWER_ITER_TOL = 1e-12
POWER_ITER_MAX = 10000
COVARIANCE_FLOOR = 1e-12
SIGN_TIE_TOL = 1e-12


class NoCompoundPromptsError(LookupError):
    """No compound prompt mentions the requested class."""

    def __init__(self, class_index: int) -> None:
        super().__init__(f"no compound prompt mentions class {class_index}")
        self.class_index = class_index


class DegenerateCovarianceError(ValueError):
    """Feature covariance is numerically zero; no variance direction exists."""


@dataclass(frozen=True, eq=False)
class OrderStatTable:
    """Sorted compound evidence for one class.

    ``values`` has shape (images, m): column k-1 holds each image's k-th
    largest debiased compound score among the ``m`` prompts that mention
    ``class_index`` (``prompt_ids`` lists them in matrix column order).
    """

    class_index: int
    values: np.ndarray
    prompt_ids: tuple[int, ...]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def kth_largest(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.m:
            raise ValueError(f"k={k} outside [1, {self.m}]")
        return self.values[:, k - 1]


@dataclass(frozen=True, eq=False)
class FusionWeights:
    """Unit-norm projection weights: slot 0 is the singleton column."""

    class_index: int
    weights: np.ndarray


def order_statistics(
    compound: ScoreMatrix, prompts: Sequence[PromptSpec], class_index: int
) -> OrderStatTable:
    """Build the descending-sorted evidence table for ``class_index``.

    ``prompts`` supplies prompt metadata; only compound prompts present
    as columns of ``compound`` and mentioning the class contribute.
    """
    by_id = {p.id: p for p in prompts}
    cols = [
        j
        for j, pid in enumerate(compound.prompt_ids)
        if pid in by_id
        and by_id[pid].kind is PromptKind.COMPOUND
        and by_id[pid].mentions(class_index)
    ]
    if not cols:
        raise NoCompoundPromptsError(class_index)
    block = compound.values[:, cols]
    table = -np.sort(-block, axis=1)  # descending per row
    return OrderStatTable(
        class_index=class_index,
        values=table,
        prompt_ids=tuple(compound.prompt_ids[j] for j in cols),
    )


def _population_cov(features: np.ndarray) -> np.ndarray:
    centered = features - features.mean(axis=0, keepdims=True)
    return centered.T @ centered / features.shape[0]


def _leading_eigenvector(cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    v = np.ones(d) / np.sqrt(d)
    for _ in range(POWER_ITER_MAX):
        w = cov @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            # start vector in the null space; perturb deterministically
            v = np.zeros(d)
            v[0] = 1.0
            continue
        w /= norm
        if np.linalg.norm(w - v) < POWER_ITER_TOL or np.linalg.norm(w + v) < POWER_ITER_TOL:
            return w
        v = w
    return v


def _fix_sign(w: np.ndarray) -> np.ndarray:
    if w[0] > SIGN_TIE_TOL:
        return w
    if w[0] < -SIGN_TIE_TOL:
        return -w
    return w if w.sum() >= 0.0 else -w


def max_variance_weights(features: np.ndarray, permissive: bool = False) -> np.ndarray:
    """Unit vector maximizing the population variance of ``features @ w``.

    Computed by power iteration on the feature covariance (start at the
    normalized all-ones vector; stop when the direction moves by less
    than ``POWER_ITER_TOL`` or after ``POWER_ITER_MAX`` rounds).  The sign
    is fixed so the slot-0 entry is nonnegative; when that entry is zero
    to within ``SIGN_TIE_TOL``, the entry sum decides.

    A covariance with no entry above ``COVARIANCE_FLOOR`` in magnitude
    carries no direction information: error, or first basis vector under
    ``permissive``.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] < 1:
        raise ValueError(f"feature matrix must be 2-D with >= 1 column, got shape {features.shape}")
    cov = _population_cov(features)
    if float(np.abs(cov).max()) <= COVARIANCE_FLOOR:
        if permissive:
            w = np.zeros(features.shape[1])
            w[0] = 1.0
            return w
        raise DegenerateCovarianceError(
            f"covariance has no entry above {COVARIANCE_FLOOR:.0e}; variance direction undefined"
        )
    return _fix_sign(_leading_eigenvector(cov))


def fuse_max_variance(
    singleton_col: np.ndarray, table: OrderStatTable, weights: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Project ``[singleton | order stats]`` onto the max-variance direction.

    Returns ``(fused_column, weights_used)``.
    """
    features = np.column_stack([singleton_col, table.values])
    if weights is None:
        weights = max_variance_weights(features)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (features.shape[1],):
        raise ValueError(f"weights shape {weights.shape} does not fit {features.shape[1]} features")
    return features @ weights, weights


def fuse_kmax(table: OrderStatTable, k: int) -> np.ndarray:
    """The k-th largest compound score per image (1-based)."""
    return table.kth_largest(k)


def fuse_mean_geq_k(table: OrderStatTable, k: int) -> np.ndarray:
    """Mean of the K-th largest through smallest compound scores."""
    if not 1 <= k <= table.m:
        raise ValueError(f"K={k} outside [1, {table.m}]")
    return table.values[:, k - 1 :].mean(axis=1)


def merge(singleton_col: np.ndarray, fused_col: np.ndarray) -> np.ndarray:
    """Additively combine direct and fused evidence."""
    return np.asarray(singleton_col, dtype=np.float64) + np.asarray(fused_col, dtype=np.float64)


@dataclass(frozen=True)
class FusionStrategy:
    """Parsed strategy: ``kind`` plus the rank parameter where one applies."""

    kind: str
    k: int | None = None

    def __str__(self) -> str:
        if self.kind == "kmax":
            return f"kmax:{self.k}"
        if self.kind == "meangeq":
            return f"meangeq:{self.k}"
        return self.kind


def parse_strategy(text: str) -> FusionStrategy:
    """Parse ``maxvariance | kmax:<k> | meangeq:<K> | singleton``."""
    text = text.strip()
    if text in ("maxvariance", "singleton"):
        return FusionStrategy(text)
    for prefix in ("kmax", "meangeq"):
        if text.startswith(prefix + ":"):
            arg = text[len(prefix) + 1 :]
            try:
                k = int(arg)
            except ValueError:
                raise ValueError(f"strategy {text!r}: rank parameter {arg!r} is not an integer") from None
            if k < 1:
                raise ValueError(f"strategy {text!r}: rank parameter must be >= 1")
            return FusionStrategy(prefix, k)
    raise ValueError(
        f"unknown strategy {text!r}; expected maxvariance, kmax:<k>, meangeq:<K>, or singleton"
    )


def sparc_pipeline(
    bundle: ScoreBundle,
    strategy: str | FusionStrategy = "maxvariance",
    merge_fused: bool = True,
    collect_weights: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Debias a bundle and fuse compound evidence into refined class scores.

    Returns an images-by-classes float64 matrix.  Classes with no
    compound prompt fall back to the debiased singleton column (with a
    warning).  ``singleton`` as strategy is a pure pass-through of the
    debiased singleton matrix regardless of ``merge_fused``.  Pass a dict
    as ``collect_weights`` to receive per-class max-variance weights.
    """
    strat = parse_strategy(strategy) if isinstance(strategy, str) else strategy
    s_bar, c_bar, _ = debias_bundle(bundle)
    n_classes = len(bundle.vocabulary)
    out = np.empty((bundle.n_images, n_classes), dtype=np.float64)

    for i in range(n_classes):
        direct = s_bar.values[:, i]
        if strat.kind == "singleton":
            out[:, i] = direct
            continue
        try:
            table = order_statistics(c_bar, bundle.prompts, i)
        except NoCompoundPromptsError:
            warnings.warn(
                f"class {i} ({bundle.vocabulary.names[i]!r}) has no compound prompts; "
                "passing the debiased singleton column through",
                stacklevel=2,
            )
            out[:, i] = direct
            continue
        if strat.kind == "maxvariance":
            fused, w = fuse_max_variance(direct, table)
            if collect_weights is not None:
                collect_weights[i] = w
        elif strat.kind == "kmax":
            if strat.k > table.m:
                raise ValueError(
                    f"strategy kmax:{strat.k} needs {strat.k} compound prompts for class {i}, found {table.m}"
                )
            fused = fuse_kmax(table, strat.k)
        elif strat.kind == "meangeq":
            if strat.k > table.m:
                raise ValueError(
                    f"strategy meangeq:{strat.k} needs {strat.k} compound prompts for class {i}, found {table.m}"
                )
            fused = fuse_mean_geq_k(table, strat.k)
        else:  # pragma: no cover - parse_strategy guards this
            raise AssertionError(f"unhandled strategy kind {strat.kind!r}")
        out[:, i] = merge(direct, fused) if merge_fused else fused
    return out


def compound_mention_counts(prompts: Iterable[PromptSpec], n_classes: int) -> np.ndarray:
    """How many compound prompts mention each class (CLI reporting helper)."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for p in prompts:
        if p.kind is PromptKind.COMPOUND:
            for c in p.class_set:
                if 0 <= c < n_classes:
                    counts[c] += 1
    return counts
