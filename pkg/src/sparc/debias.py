"""Two-stage score standardization.

VLM similarity scores carry two nuisance effects: a per-image affine bias
(some images score high against everything) and a per-prompt affine bias
(some prompt texts score high on every image).  Both stages below are
z-scores with population (``ddof=0``) statistics:

* image debias: subtract each image's mean score and divide by its
  standard deviation, where mean and deviation are taken over a chosen
  set of prompt columns.  Singleton scores use their own row statistics;
  compound scores use the *auxiliary* row statistics, so that compound
  phrasing cannot contaminate the baseline it is measured against.
* prompt debias: z-score each column across images.

Composing both stages makes the result exactly invariant to per-image
and per-prompt affine maps with positive scale, and the composition is
idempotent.  A row or column whose standard deviation falls at or below
``SD_FLOOR`` has no usable scale information; that is a hard error
(:class:`DegenerateDistributionError`), never a silent clamp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ScoreBundle, ScoreMatrix

__all__ = [
    "SD_FLOOR",
    "DegenerateDistributionError",
    "DebiasStats",
    "image_debias",
    "prompt_debias",
    "debias_bundle",
]

SD_FLOOR = 1e-12


class DegenerateDistributionError(ValueError):
    """A standardization row/column is (numerically) constant.

    ``axis`` is ``"image"`` or ``"prompt"``; ``index`` locates the
    offending row or column in the matrix that was being standardized.
    """

    def __init__(self, axis: str, index: int, sd: float) -> None:
        super().__init__(
            f"cannot standardize: {axis} {index} has standard deviation {sd:.3e} <= {SD_FLOOR:.0e}"
        )
        self.axis = axis
        self.index = index
        self.sd = sd


def _row_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=1)
    sd = values.std(axis=1)  # population
    return mean, sd


def _col_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    sd = values.std(axis=0)
    return mean, sd


def _check_sd(sd: np.ndarray, axis: str) -> None:
    bad = np.flatnonzero(sd <= SD_FLOOR)
    if bad.size:
        raise DegenerateDistributionError(axis, int(bad[0]), float(sd[bad[0]]))


@dataclass(frozen=True)
class DebiasStats:
    """Per-image and per-prompt statistics actually used, for reporting.

    ``image_mean``/``image_sd`` hold one array per matrix name
    (``"singleton"``, ``"compound"``), length = number of images.  The
    compound entries are the *auxiliary* row statistics.  ``prompt_mean``
    and ``prompt_sd`` are the column statistics applied in stage two,
    one array per matrix name, length = number of columns.
    """

    image_mean: dict[str, np.ndarray]
    image_sd: dict[str, np.ndarray]
    prompt_mean: dict[str, np.ndarray]
    prompt_sd: dict[str, np.ndarray]


def image_debias(target: ScoreMatrix, stats_source: ScoreMatrix | None = None) -> ScoreMatrix:
    """Stage one: standardize each image row of ``target``.

    Row mean and population deviation come from ``stats_source`` (same
    image order required) when given, else from ``target`` itself.
    """
    source = target if stats_source is None else stats_source
    if source.image_ids != target.image_ids:
        raise ValueError("image_debias: stats source and target disagree on image ids/order")
    mean, sd = _row_stats(source.values)
    _check_sd(sd, "image")
    out = (target.values - mean[:, None]) / sd[:, None]
    return ScoreMatrix(out, target.image_ids, target.prompt_ids, stage="image_debiased")


def prompt_debias(scores: ScoreMatrix) -> ScoreMatrix:
    """Stage two: standardize each prompt column across images."""
    mean, sd = _col_stats(scores.values)
    _check_sd(sd, "prompt")
    out = (scores.values - mean[None, :]) / sd[None, :]
    return ScoreMatrix(out, scores.image_ids, scores.prompt_ids, stage="debiased")


def debias_bundle(bundle: ScoreBundle) -> tuple[ScoreMatrix, ScoreMatrix, DebiasStats]:
    """Run both stages on a bundle.

    Returns ``(singleton_debiased, compound_debiased, stats)``.  Singleton
    rows are standardized against themselves; compound rows against the
    auxiliary matrix rows.  Both then get column standardization.
    """
    s_mean, s_sd = _row_stats(bundle.singleton.values)
    _check_sd(s_sd, "image")
    a_mean, a_sd = _row_stats(bundle.auxiliary.values)
    _check_sd(a_sd, "image")

    s_stage1 = image_debias(bundle.singleton)
    c_stage1 = image_debias(bundle.compound, stats_source=bundle.auxiliary)

    sp_mean, sp_sd = _col_stats(s_stage1.values)
    cp_mean, cp_sd = _col_stats(c_stage1.values)
    s_bar = prompt_debias(s_stage1)
    c_bar = prompt_debias(c_stage1)

    stats = DebiasStats(
        image_mean={"singleton": s_mean, "compound": a_mean},
        image_sd={"singleton": s_sd, "compound": a_sd},
        prompt_mean={"singleton": sp_mean, "compound": cp_mean},
        prompt_sd={"singleton": sp_sd, "compound": cp_sd},
    )
    return s_bar, c_bar, stats
