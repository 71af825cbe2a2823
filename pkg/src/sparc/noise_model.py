"""Structural models for compound-prompt scores as functions of label pairs.

A compound prompt mentioning classes ``(i, j)`` gets a score that depends,
through the scoring model, on whether each mentioned class is actually in the
image.  This module fits a ladder of small structural families to observed
(score, label-pair) data and reports the fraction of variance unexplained
(FVU) for each, so the families can be compared on equal footing.

Every family predicts from the two per-class values

    val_c = value_absent[c] + y_c * (value_present[c] - value_absent[c])

i.e. each class contributes one of two learned levels depending on its label.
The families differ in how the two contributions combine:

    constant            c                         (null model, FVU = 1)
    only_and            min(val_i, val_j)
    only_or             max(val_i, val_j)
    additive            val_i + val_j
    or_static_bonus     max + delta * min         (one shared delta)
    or_variable_bonus   max + delta_ij * min      (per-pair delta)
    lut                 free 4-entry table per pair (saturated model)

``constant`` and ``lut`` bracket the ladder: the former explains nothing by
construction, the latter is the exact least-squares optimum over *all*
functions of (pair, y_i, y_j), so its FVU lower-bounds every other family.

Fitting the min/max families is done by exact block coordinate descent: the
objective restricted to a single parameter is piecewise quadratic with
breakpoints at the current partner values, so each coordinate update is a
closed-form global minimization, not a line search.  A safeguarded
"assignment" polish step (solve the linear least-squares problem implied by
the current argmax/argmin pattern, accept only on true-objective decrease)
lets the fit land exactly on noiseless generator output instead of stalling
at coordinate-wise stationary points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import LabelMatrix, ScoreBundle, ScoreMatrix
from .debias import debias_bundle
from .rng import standard_normal, stream

FAMILY_NAMES = (
    "constant",
    "only_and",
    "only_or",
    "additive",
    "or_static_bonus",
    "or_variable_bonus",
    "lut",
)

#: Families whose prediction is max(val_i, val_j) plus a multiple of the min.
_BONUS_FAMILIES = ("only_or", "or_static_bonus", "or_variable_bonus")

#: Stream id for pair-score generation noise.
STREAM_PAIR_SCORES = 0x50414952

MAX_SWEEPS = 200
REL_IMPROVEMENT_TOL = 1e-10
_POLISH_ROUNDS = 30
_OUTER_ROUNDS = 8


class NoiseFitError(ValueError):
    pass


def _pair_tuple(pair) -> tuple[int, int]:
    i, j = (int(p) for p in pair)
    if i >= j:
        raise ValueError(f"pair must be ordered (i, j) with i < j, got ({i}, {j})")
    if i < 0:
        raise ValueError(f"negative class index in pair ({i}, {j})")
    return (i, j)


@dataclass(frozen=True, eq=False)
class PairObservations:
    """Columnar view of (pair, score, labels) observations.

    ``pairs`` lists the distinct class pairs; ``pair_index[t]`` says which
    pair observation ``t`` belongs to.  Scores are float64, labels 0/1.
    """

    pairs: tuple[tuple[int, int], ...]
    pair_index: np.ndarray
    scores: np.ndarray
    label_i: np.ndarray
    label_j: np.ndarray
    n_classes: int

    def __init__(self, pairs, pair_index, scores, label_i, label_j, n_classes: int) -> None:
        pairs = tuple(_pair_tuple(p) for p in pairs)
        idx = np.ascontiguousarray(np.asarray(pair_index, dtype=np.int64))
        sc = np.ascontiguousarray(np.asarray(scores, dtype=np.float64))
        li = np.ascontiguousarray(np.asarray(label_i, dtype=np.uint8))
        lj = np.ascontiguousarray(np.asarray(label_j, dtype=np.uint8))
        n_classes = int(n_classes)
        if not (idx.shape == sc.shape == li.shape == lj.shape) or idx.ndim != 1:
            raise ValueError("pair_index, scores, label_i, label_j must be equal-length 1-D arrays")
        if len(set(pairs)) != len(pairs):
            raise ValueError("pairs contains duplicates")
        for i, j in pairs:
            if j >= n_classes:
                raise ValueError(f"pair ({i}, {j}) references class >= n_classes={n_classes}")
        if idx.size and (idx.min() < 0 or idx.max() >= len(pairs)):
            raise ValueError("pair_index out of range")
        if np.any(li > 1) or np.any(lj > 1):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(sc)):
            raise ValueError("scores must be finite")
        for name, value in (
            ("pairs", pairs), ("pair_index", idx), ("scores", sc),
            ("label_i", li), ("label_j", lj), ("n_classes", n_classes),
        ):
            object.__setattr__(self, name, value)

    @property
    def n_obs(self) -> int:
        return int(self.scores.size)

    def class_columns(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-observation class indices (ci, cj) as int64 arrays."""
        arr = np.asarray(self.pairs, dtype=np.int64).reshape(len(self.pairs), 2)
        return arr[self.pair_index, 0], arr[self.pair_index, 1]

    @classmethod
    def from_bundle(cls, bundle: ScoreBundle, debias: bool = True) -> "PairObservations":
        """Collect observations from every 2-class compound column of a bundle.

        With ``debias=True`` the compound scores go through the full
        image-then-prompt standardization first; pass ``debias=False`` when
        the scores are already free of per-image offset/scale effects.
        """
        if bundle.labels is None:
            raise ValueError("bundle has no labels; cannot build pair observations")
        if debias:
            _, compound, _ = debias_bundle(bundle)
        else:
            compound = bundle.compound
        lab = bundle.labels.values
        col_of = {pid: k for k, pid in enumerate(compound.prompt_ids)}
        pairs: list[tuple[int, int]] = []
        pair_of: dict[tuple[int, int], int] = {}
        idx_parts, score_parts, li_parts, lj_parts = [], [], [], []
        for prompt in bundle.compound_prompts():
            if len(prompt.class_set) != 2:
                continue
            key = prompt.class_set
            if key not in pair_of:
                pair_of[key] = len(pairs)
                pairs.append(key)
            i, j = key
            m = lab.shape[0]
            idx_parts.append(np.full(m, pair_of[key], dtype=np.int64))
            score_parts.append(compound.values[:, col_of[prompt.id]])
            li_parts.append(lab[:, i])
            lj_parts.append(lab[:, j])
        if not pairs:
            raise ValueError("bundle has no 2-class compound prompts")
        return cls(
            pairs=pairs,
            pair_index=np.concatenate(idx_parts),
            scores=np.concatenate(score_parts),
            label_i=np.concatenate(li_parts),
            label_j=np.concatenate(lj_parts),
            n_classes=len(bundle.vocabulary),
        )


@dataclass(frozen=True, eq=False)
class NoiseModelFit:
    """Fitted parameters for one family, plus its FVU and fit diagnostics.

    Only the fields the family uses are populated.  ``pair_bonus_weight``
    stores, for the variable-bonus family, the per-pair sum of squared min
    values — the exact least-squares weight that turns the per-pair bonuses
    into the single bonus a static fit would recover at the same levels.
    ``flags`` records soft problems (empty table cells, iteration budget).
    """

    family: str
    fvu: float
    constant: float | None = None
    value_absent: np.ndarray | None = None
    value_present: np.ndarray | None = None
    bonus: float | None = None
    pair_bonus: dict[tuple[int, int], float] | None = None
    pair_bonus_weight: dict[tuple[int, int], float] | None = None
    lut: dict[tuple[int, int], np.ndarray] | None = None
    flags: tuple[str, ...] = ()
    sweeps: int = 0


@dataclass(frozen=True, eq=False)
class NoiseGenParams:
    """Parameters for generating pair scores from labels.

    ``theta0``/``theta1`` are per-image offset and positive scale (scalar or
    length-M array); ``sigma`` is the additive noise SD.  ``bonus`` may be a
    scalar (static) or a per-pair mapping (variable); ``constant`` and
    ``lut`` serve the corresponding families.
    """

    value_absent: np.ndarray
    value_present: np.ndarray
    bonus: float | Mapping[tuple[int, int], float] = 0.0
    theta0: float | np.ndarray = 0.0
    theta1: float | np.ndarray = 1.0
    sigma: float = 0.0
    constant: float = 0.0
    lut: Mapping[tuple[int, int], np.ndarray] | None = None

    def __init__(self, value_absent, value_present, bonus=0.0, theta0=0.0,
                 theta1=1.0, sigma=0.0, constant=0.0, lut=None) -> None:
        u = np.atleast_1d(np.asarray(value_absent, dtype=np.float64))
        v = np.atleast_1d(np.asarray(value_present, dtype=np.float64))
        if u.shape != v.shape or u.ndim != 1:
            raise ValueError("value_absent and value_present must be equal-length 1-D")
        sigma = float(sigma)
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        t1 = np.asarray(theta1, dtype=np.float64)
        if np.any(t1 <= 0):
            raise ValueError("theta1 must be positive")
        if isinstance(bonus, Mapping):
            bonus = {_pair_tuple(k): float(d) for k, d in bonus.items()}
        else:
            bonus = float(bonus)
        if lut is not None:
            lut = {_pair_tuple(k): np.asarray(t, dtype=np.float64).reshape(2, 2)
                   for k, t in lut.items()}
        for name, value in (
            ("value_absent", u), ("value_present", v), ("bonus", bonus),
            ("theta0", np.asarray(theta0, dtype=np.float64)), ("theta1", t1),
            ("sigma", sigma), ("constant", float(constant)), ("lut", lut),
        ):
            object.__setattr__(self, name, value)


# ---------------------------------------------------------------------------
# prediction


def _class_values(u: np.ndarray, v: np.ndarray, cls: np.ndarray, label: np.ndarray) -> np.ndarray:
    base = u[cls]
    return base + label * (v[cls] - u[cls])


def _require(fit: NoiseModelFit, *names: str) -> None:
    missing = [n for n in names if getattr(fit, n) is None]
    if missing:
        raise NoiseFitError(
            f"family {fit.family!r} needs parameter(s) {missing} but they are not set")


def predict(fit: NoiseModelFit, pair, labels) -> float:
    """Evaluate the fitted family for one class pair and one label pair."""
    i, j = _pair_tuple(pair)
    yi, yj = (int(y) for y in labels)
    if yi not in (0, 1) or yj not in (0, 1):
        raise ValueError(f"labels must be 0/1, got ({yi}, {yj})")
    family = fit.family
    if family == "constant":
        _require(fit, "constant")
        return float(fit.constant)
    if family == "lut":
        _require(fit, "lut")
        if (i, j) not in fit.lut:
            raise NoiseFitError(f"no table fitted for pair ({i}, {j})")
        return float(fit.lut[(i, j)][yi, yj])
    _require(fit, "value_absent", "value_present")
    u, v = fit.value_absent, fit.value_present
    vi = u[i] + yi * (v[i] - u[i])
    vj = u[j] + yj * (v[j] - u[j])
    if family == "only_and":
        return float(min(vi, vj))
    if family == "additive":
        return float(vi + vj)
    if family == "only_or":
        return float(max(vi, vj))
    if family == "or_static_bonus":
        _require(fit, "bonus")
        return float(max(vi, vj) + fit.bonus * min(vi, vj))
    if family == "or_variable_bonus":
        _require(fit, "pair_bonus")
        if (i, j) not in fit.pair_bonus:
            raise NoiseFitError(f"no bonus fitted for pair ({i}, {j})")
        return float(max(vi, vj) + fit.pair_bonus[(i, j)] * min(vi, vj))
    raise ValueError(f"unknown family {family!r}")


def predict_observations(fit: NoiseModelFit, obs: PairObservations) -> np.ndarray:
    """Vectorized :func:`predict` over every observation."""
    family = fit.family
    if family == "constant":
        _require(fit, "constant")
        return np.full(obs.n_obs, fit.constant, dtype=np.float64)
    if family == "lut":
        _require(fit, "lut")
        out = np.empty(obs.n_obs, dtype=np.float64)
        for k, pair in enumerate(obs.pairs):
            if pair not in fit.lut:
                raise NoiseFitError(f"no table fitted for pair {pair}")
            mask = obs.pair_index == k
            out[mask] = fit.lut[pair][obs.label_i[mask], obs.label_j[mask]]
        return out
    _require(fit, "value_absent", "value_present")
    ci, cj = obs.class_columns()
    vi = _class_values(fit.value_absent, fit.value_present, ci, obs.label_i)
    vj = _class_values(fit.value_absent, fit.value_present, cj, obs.label_j)
    if family == "only_and":
        return np.minimum(vi, vj)
    if family == "additive":
        return vi + vj
    hi, lo = np.maximum(vi, vj), np.minimum(vi, vj)
    if family == "only_or":
        return hi
    if family == "or_static_bonus":
        _require(fit, "bonus")
        return hi + fit.bonus * lo
    if family == "or_variable_bonus":
        _require(fit, "pair_bonus")
        d = np.empty(obs.n_obs, dtype=np.float64)
        for k, pair in enumerate(obs.pairs):
            if pair not in fit.pair_bonus:
                raise NoiseFitError(f"no bonus fitted for pair {pair}")
            d[obs.pair_index == k] = fit.pair_bonus[pair]
        return hi + d * lo
    raise ValueError(f"unknown family {family!r}")


def compute_fvu(predictions, scores) -> float:
    """Fraction of variance unexplained: SS_res / SS_tot around the score mean."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if p.shape != s.shape:
        raise ValueError(f"predictions ({p.size}) and scores ({s.size}) differ in length")
    if s.size < 2:
        raise ValueError("need at least 2 scores to compute FVU")
    centered = s - s.mean()
    ss_tot = float(centered @ centered)
    if ss_tot <= 0.0:
        raise ValueError("score variance is zero; FVU undefined")
    resid = s - p
    return float(resid @ resid) / ss_tot


# ---------------------------------------------------------------------------
# exact fits: constant, lut, additive


def _touched_classes(obs: PairObservations) -> np.ndarray:
    return np.unique(np.asarray(obs.pairs, dtype=np.int64).ravel())


def _fit_constant(obs: PairObservations) -> NoiseModelFit:
    c = float(obs.scores.mean())
    fvu = compute_fvu(np.full(obs.n_obs, c), obs.scores)
    return NoiseModelFit(family="constant", fvu=fvu, constant=c)


def _fit_lut(obs: PairObservations) -> NoiseModelFit:
    tables: dict[tuple[int, int], np.ndarray] = {}
    flags: list[str] = []
    global_mean = float(obs.scores.mean())
    preds = np.empty(obs.n_obs, dtype=np.float64)
    for k, pair in enumerate(obs.pairs):
        mask = obs.pair_index == k
        pair_scores = obs.scores[mask]
        pair_mean = float(pair_scores.mean()) if pair_scores.size else global_mean
        if not pair_scores.size:
            flags.append(f"empty_pair:pair={pair}")
        table = np.full((2, 2), pair_mean, dtype=np.float64)
        li, lj = obs.label_i[mask], obs.label_j[mask]
        for yi in (0, 1):
            for yj in (0, 1):
                cell = pair_scores[(li == yi) & (lj == yj)]
                if cell.size:
                    table[yi, yj] = cell.mean()
                else:
                    flags.append(f"empty_cell:pair={pair},labels=({yi},{yj})")
        tables[pair] = table
        preds[mask] = table[li, lj]
    fvu = compute_fvu(preds, obs.scores)
    return NoiseModelFit(family="lut", fvu=fvu, lut=tables, flags=tuple(flags))


def _additive_design(obs: PairObservations, touched: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    pos = {int(c): k for k, c in enumerate(touched)}
    ci, cj = obs.class_columns()
    x = np.zeros((obs.n_obs, 2 * len(touched)), dtype=np.float64)
    rows = np.arange(obs.n_obs)
    for cls, lab in ((ci, obs.label_i), (cj, obs.label_j)):
        cols = np.array([pos[int(c)] for c in cls], dtype=np.int64)
        x[rows, 2 * cols] += 1.0
        x[rows, 2 * cols + 1] += lab
    return x, pos


def _fit_additive(obs: PairObservations) -> NoiseModelFit:
    touched = _touched_classes(obs)
    x, pos = _additive_design(obs, touched)
    coef, *_ = np.linalg.lstsq(x, obs.scores, rcond=None)
    u = np.zeros(obs.n_classes, dtype=np.float64)
    v = np.zeros(obs.n_classes, dtype=np.float64)
    for c, k in pos.items():
        u[c] = coef[2 * k]
        v[c] = coef[2 * k] + coef[2 * k + 1]
    fvu = compute_fvu(x @ coef, obs.scores)
    return NoiseModelFit(family="additive", fvu=fvu, value_absent=u, value_present=v)


# ---------------------------------------------------------------------------
# iterative fits: only_and, only_or, or_static_bonus, or_variable_bonus


def _pair_values(obs: PairObservations, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ci, cj = obs.class_columns()
    return (_class_values(u, v, ci, obs.label_i),
            _class_values(u, v, cj, obs.label_j))


def _bonus_per_obs(obs: PairObservations, family: str, delta) -> np.ndarray | None:
    if family == "only_and":
        return None
    if family == "only_or":
        return np.zeros(obs.n_obs, dtype=np.float64)
    if family == "or_static_bonus":
        return np.full(obs.n_obs, float(delta), dtype=np.float64)
    return np.asarray(delta, dtype=np.float64)[obs.pair_index]


def _objective(obs: PairObservations, family: str, vi: np.ndarray, vj: np.ndarray, d_obs) -> float:
    if family == "only_and":
        pred = np.minimum(vi, vj)
    else:
        pred = np.maximum(vi, vj)
        if d_obs is not None and family != "only_or":
            pred = pred + d_obs * np.minimum(vi, vj)
    resid = obs.scores - pred
    return float(resid @ resid)


def _exact_bonus_update(obs: PairObservations, family: str, vi, vj, delta):
    """Least-squares bonus given the levels: regress s - max on min."""
    if family not in ("or_static_bonus", "or_variable_bonus"):
        return delta
    lo = np.minimum(vi, vj)
    resid = obs.scores - np.maximum(vi, vj)
    if family == "or_static_bonus":
        den = float(lo @ lo)
        return float(lo @ resid) / den if den > 0.0 else delta
    num = np.bincount(obs.pair_index, weights=lo * resid, minlength=len(obs.pairs))
    den = np.bincount(obs.pair_index, weights=lo * lo, minlength=len(obs.pairs))
    new = np.asarray(delta, dtype=np.float64).copy()
    ok = den > 0.0
    new[ok] = num[ok] / den[ok]
    return new


def _coordinate_step(theta: float, p: np.ndarray, s: np.ndarray, d: np.ndarray | None,
                     kind: str) -> float:
    """Exact 1-D minimization of sum((f(theta) - s)^2).

    ``f`` is max(theta, p) + d*min(theta, p) for kind "max" (d may be all
    zeros) or min(theta, p) for kind "min".  Piecewise quadratic in theta
    with breakpoints at the partner values p; each interval is minimized in
    closed form and the best interval wins.  Keeps the current theta when no
    strict improvement exists.
    """
    n = p.size
    if n == 0:
        return theta
    order = np.argsort(p, kind="stable")
    p, s = p[order], s[order]
    if kind == "max":
        d = d[order]
        a_left, e_left = d, p - s
        a_right, e_right = np.ones(n), d * p - s
    else:
        a_left, e_left = np.ones(n), -s
        a_right, e_right = np.zeros(n), p - s

    def pre(x):
        out = np.empty(n + 1)
        out[0] = 0.0
        np.cumsum(x, out=out[1:])
        return out

    r_a2, r_ae, r_e2 = pre(a_right * a_right), pre(a_right * e_right), pre(e_right * e_right)
    l_a2, l_ae, l_e2 = pre(a_left * a_left), pre(a_left * e_left), pre(e_left * e_left)
    alpha = r_a2 + (l_a2[n] - l_a2)
    beta = r_ae + (l_ae[n] - l_ae)
    gamma = r_e2 + (l_e2[n] - l_e2)
    lo = np.concatenate(([-np.inf], p))
    hi = np.concatenate((p, [np.inf]))
    safe = np.where(alpha > 0.0, alpha, 1.0)
    cand = np.where(alpha > 0.0, -beta / safe, np.clip(theta, lo, hi))
    cand = np.minimum(np.maximum(cand, lo), hi)
    cand = np.where(np.isfinite(cand), cand, 0.0)
    costs = alpha * cand * cand + 2.0 * beta * cand + gamma
    best = int(np.argmin(costs))

    in_right = theta > p
    a_cur = np.where(in_right, a_right, a_left)
    e_cur = np.where(in_right, e_right, e_left)
    resid = a_cur * theta + e_cur
    current_cost = float(resid @ resid)
    return float(cand[best]) if costs[best] < current_cost else theta


@dataclass
class _CoordSlots:
    """Pre-indexed observation slots for one (class, label-side) parameter."""

    idx_i: np.ndarray
    idx_j: np.ndarray
    scores: np.ndarray


def _build_slots(obs: PairObservations) -> dict[tuple[int, int], _CoordSlots]:
    ci, cj = obs.class_columns()
    slots: dict[tuple[int, int], _CoordSlots] = {}
    for c in _touched_classes(obs):
        for side in (0, 1):
            idx_i = np.flatnonzero((ci == c) & (obs.label_i == side))
            idx_j = np.flatnonzero((cj == c) & (obs.label_j == side))
            slots[(int(c), side)] = _CoordSlots(
                idx_i=idx_i, idx_j=idx_j,
                scores=np.concatenate((obs.scores[idx_i], obs.scores[idx_j])),
            )
    return slots


def _descend(obs: PairObservations, family: str, u: np.ndarray, v: np.ndarray,
             delta, budget: int) -> tuple[np.ndarray, np.ndarray, object, float, int, bool]:
    """Run coordinate sweeps until relative improvement stalls or budget ends."""
    kind = "min" if family == "only_and" else "max"
    slots = _build_slots(obs)
    vi, vj = _pair_values(obs, u, v)
    d_obs = _bonus_per_obs(obs, family, delta)
    j_prev = _objective(obs, family, vi, vj, d_obs)
    used = 0
    converged = False
    while used < budget:
        used += 1
        if family in ("or_static_bonus", "or_variable_bonus"):
            delta = _exact_bonus_update(obs, family, vi, vj, delta)
            d_obs = _bonus_per_obs(obs, family, delta)
        for (c, side), slot in slots.items():
            theta = v[c] if side else u[c]
            partners = np.concatenate((vj[slot.idx_i], vi[slot.idx_j]))
            if partners.size == 0:
                continue
            d_slot = None
            if kind == "max":
                d_slot = np.concatenate((d_obs[slot.idx_i], d_obs[slot.idx_j]))
            theta_new = _coordinate_step(theta, partners, slot.scores, d_slot, kind)
            if theta_new != theta:
                if side:
                    v[c] = theta_new
                else:
                    u[c] = theta_new
                vi[slot.idx_i] = theta_new
                vj[slot.idx_j] = theta_new
        j_now = _objective(obs, family, vi, vj, d_obs)
        if j_prev - j_now <= REL_IMPROVEMENT_TOL * max(j_prev, 1e-300):
            j_prev = j_now
            converged = True
            break
        j_prev = j_now
    return u, v, delta, j_prev, used, converged


def _polish(obs: PairObservations, family: str, u: np.ndarray, v: np.ndarray,
            delta, j_current: float):
    """Safeguarded Gauss-Newton polish at the current argmax/argmin pattern.

    With the winner/loser assignment frozen, the prediction is
    ``levels_of_winners + bonus * levels_of_losers`` — smooth in the levels
    and the bonus jointly — so a Gauss-Newton step with backtracking hops
    over the slow level/bonus alternation; on noiseless generator output it
    converges quadratically to a zero-residual point.  Every step is accepted
    only if the true (re-assigned) objective decreases.
    """
    touched = _touched_classes(obs)
    pos = {int(c): k for k, c in enumerate(touched)}
    n_levels = 2 * len(touched)
    ci, cj = obs.class_columns()
    col_i = 2 * np.array([pos[int(c)] for c in ci], dtype=np.int64) + obs.label_i
    col_j = 2 * np.array([pos[int(c)] for c in cj], dtype=np.int64) + obs.label_j
    rows = np.arange(obs.n_obs)
    # structurally unused (class, side) parameters keep their current values
    used_cols = np.zeros(n_levels, dtype=bool)
    used_cols[col_i] = True
    used_cols[col_j] = True
    active = np.flatnonzero(used_cols)
    if active.size == 0:
        return u, v, delta, j_current, False
    has_static = family == "or_static_bonus"
    has_variable = family == "or_variable_bonus"
    improved = False
    for _ in range(_POLISH_ROUNDS):
        packed = np.empty(n_levels)
        for c, k in pos.items():
            packed[2 * k] = u[c]
            packed[2 * k + 1] = v[c]
        vi, vj = _pair_values(obs, u, v)
        d_obs = _bonus_per_obs(obs, family, delta)
        if family == "only_and":
            i_wins = vi <= vj
        else:
            i_wins = vi >= vj
        if family in ("only_and", "only_or"):
            w_lose_i = np.zeros(obs.n_obs)
            w_lose_j = np.zeros(obs.n_obs)
        else:
            w_lose_i = np.where(i_wins, 0.0, d_obs)
            w_lose_j = np.where(i_wins, d_obs, 0.0)
        x = np.zeros((obs.n_obs, n_levels), dtype=np.float64)
        x[rows, col_i] += np.where(i_wins, 1.0, 0.0) + w_lose_i
        x[rows, col_j] += np.where(i_wins, 0.0, 1.0) + w_lose_j
        resid = x @ packed - obs.scores
        loser_level = np.where(i_wins, vj, vi)
        if has_static:
            jac = np.concatenate((x[:, active], loser_level[:, None]), axis=1)
        elif has_variable:
            dcols = np.zeros((obs.n_obs, len(obs.pairs)))
            dcols[rows, obs.pair_index] = loser_level
            jac = np.concatenate((x[:, active], dcols), axis=1)
        else:
            jac = x[:, active]
        step, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        accepted = False
        scale = 1.0
        for _ in range(10):
            cand = packed.copy()
            cand[active] += scale * step[: active.size]
            u2, v2 = u.copy(), v.copy()
            for c, k in pos.items():
                u2[c] = cand[2 * k]
                v2[c] = cand[2 * k + 1]
            if has_static:
                delta2 = float(delta) + scale * float(step[active.size])
            elif has_variable:
                delta2 = np.asarray(delta, dtype=np.float64) + scale * step[active.size:]
            else:
                delta2 = delta
            vi2, vj2 = _pair_values(obs, u2, v2)
            delta2 = _exact_bonus_update(obs, family, vi2, vj2, delta2)
            j_new = _objective(obs, family, vi2, vj2, _bonus_per_obs(obs, family, delta2))
            # only decreases beyond the convergence tolerance count, so a
            # float-noise wiggle at the optimum does not read as progress
            if j_new < j_current - REL_IMPROVEMENT_TOL * max(j_current, 1e-300):
                u, v, delta, j_current = u2, v2, delta2, j_new
                accepted = True
                improved = True
                break
            scale *= 0.5
        if not accepted:
            break
    return u, v, delta, j_current, improved


def _revealed_cell_init(obs: PairObservations, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Level estimates from the label cells that expose each parameter.

    Under a max, an observation with one class present and the partner absent
    usually sits exactly at the present class's level; under a min, one with
    the class absent and the partner present sits at the absent level.  Cell
    means over those observations give starts inside the right basin, which
    the additive start often is not for pure min/max data.
    """
    ci, cj = obs.class_columns()
    mean = float(obs.scores.mean())
    u0 = np.full(obs.n_classes, mean)
    v0 = np.full(obs.n_classes, mean)
    for c in _touched_classes(obs):
        own = np.where(ci == c, obs.label_i, np.where(cj == c, obs.label_j, 255))
        partner = np.where(ci == c, obs.label_j, np.where(cj == c, obs.label_i, 255))
        if kind == "max":
            revealing = {0: (0, 0), 1: (1, 0)}
        else:
            revealing = {0: (0, 1), 1: (1, 1)}
        for side, (y_own, y_partner) in revealing.items():
            sel = obs.scores[(own == y_own) & (partner == y_partner)]
            if not sel.size:
                sel = obs.scores[own == y_own]
            if sel.size:
                if side:
                    v0[c] = sel.mean()
                else:
                    u0[c] = sel.mean()
    return u0, v0


def _initial_points(obs: PairObservations, family: str, extra=(), chain: bool = True):
    """Starting points: additive and revealed-cell solutions plus a
    family-specific chain.

    Chaining the simpler family's optimum in as a start guarantees the fitted
    objective can only improve on it, which is what makes the FVU ladder
    monotone without slack games.
    """
    add = _fit_additive(obs)
    mean = float(obs.scores.mean())
    flat_u = np.full(obs.n_classes, mean)
    flat_v = np.full(obs.n_classes, mean)
    kind = "min" if family == "only_and" else "max"
    cell_u, cell_v = _revealed_cell_init(obs, kind)
    points: list[tuple[np.ndarray, np.ndarray, object]] = []
    if family in ("only_or", "only_and"):
        points.append((add.value_absent.copy(), add.value_present.copy(), None))
        points.append((cell_u, cell_v, None))
        points.append((flat_u, flat_v, None))
    elif family == "or_static_bonus":
        points.append((add.value_absent.copy(), add.value_present.copy(), 0.5))
        points.append((cell_u, cell_v, 0.5))
        if chain:
            parent = _fit_minmax(obs, "only_or")
            points.append((parent.value_absent.copy(), parent.value_present.copy(), 0.0))
    elif family == "or_variable_bonus":
        n_pairs = len(obs.pairs)
        points.append((add.value_absent.copy(), add.value_present.copy(),
                       np.full(n_pairs, 0.5)))
        points.append((cell_u, cell_v, np.full(n_pairs, 0.5)))
        if chain:
            parent = _fit_minmax(obs, "or_static_bonus")
            points.append((parent.value_absent.copy(), parent.value_present.copy(),
                           np.full(n_pairs, parent.bonus)))
    for u0, v0, d0 in extra:
        points.append((np.asarray(u0, dtype=np.float64).copy(),
                       np.asarray(v0, dtype=np.float64).copy(),
                       d0 if d0 is None or np.isscalar(d0) else np.asarray(d0, dtype=np.float64).copy()))
    return points


def _fit_minmax(obs: PairObservations, family: str, extra_inits=(),
                chain: bool = True) -> NoiseModelFit:
    best = None
    for u0, v0, d0 in _initial_points(obs, family, extra_inits, chain):
        u, v, delta = u0.copy(), v0.copy(), d0
        if isinstance(delta, np.ndarray):
            delta = delta.copy()
        budget = MAX_SWEEPS
        total_used = 0
        converged = False
        j_val = None
        for _ in range(_OUTER_ROUNDS):
            chunk = min(budget, MAX_SWEEPS // _OUTER_ROUNDS)
            u, v, delta, j_val, used, conv = _descend(obs, family, u, v, delta, chunk)
            total_used += used
            budget -= used
            u, v, delta, j_val, improved = _polish(obs, family, u, v, delta, j_val)
            converged = conv and not improved
            if converged or budget <= 0:
                break
        if best is None or j_val < best[0]:
            best = (j_val, u, v, delta, total_used, converged)
    j_val, u, v, delta, total_used, converged = best
    if family in ("or_static_bonus", "or_variable_bonus"):
        # leave the bonus exactly least-squares optimal at the final levels
        vi, vj = _pair_values(obs, u, v)
        delta = _exact_bonus_update(obs, family, vi, vj, delta)
    flags = () if converged else ("iteration_budget",)
    kwargs: dict = {}
    if family == "or_static_bonus":
        kwargs["bonus"] = float(delta)
    elif family == "or_variable_bonus":
        vi, vj = _pair_values(obs, u, v)
        lo = np.minimum(vi, vj)
        weights = np.bincount(obs.pair_index, weights=lo * lo, minlength=len(obs.pairs))
        kwargs["pair_bonus"] = {pair: float(delta[k]) for k, pair in enumerate(obs.pairs)}
        kwargs["pair_bonus_weight"] = {pair: float(weights[k]) for k, pair in enumerate(obs.pairs)}
    fit = NoiseModelFit(family=family, fvu=0.0, value_absent=u, value_present=v,
                        flags=flags, sweeps=total_used, **kwargs)
    fvu = compute_fvu(predict_observations(fit, obs), obs.scores)
    return NoiseModelFit(family=family, fvu=fvu, value_absent=u, value_present=v,
                         flags=flags, sweeps=total_used, **kwargs)


def fit_noise_model(obs: PairObservations, family: str) -> NoiseModelFit:
    """Fit one family to the observations by exact least squares where the
    family allows it and safeguarded coordinate descent otherwise."""
    family = str(family)
    if family not in FAMILY_NAMES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILY_NAMES}")
    if obs.n_obs == 0:
        raise NoiseFitError("no observations to fit")
    if family == "constant":
        return _fit_constant(obs)
    if family == "lut":
        return _fit_lut(obs)
    if family == "additive":
        return _fit_additive(obs)
    return _fit_minmax(obs, family)


def fit_all_families(obs: PairObservations) -> dict[str, NoiseModelFit]:
    """Fit every family, reusing each simpler fit as a start for the next."""
    fits: dict[str, NoiseModelFit] = {}
    fits["constant"] = _fit_constant(obs)
    fits["additive"] = _fit_additive(obs)
    fits["lut"] = _fit_lut(obs)
    fits["only_and"] = _fit_minmax(obs, "only_and")
    fits["only_or"] = _fit_minmax(obs, "only_or")
    por = fits["only_or"]
    fits["or_static_bonus"] = _fit_minmax(
        obs, "or_static_bonus",
        extra_inits=[(por.value_absent, por.value_present, 0.0)], chain=False)
    pst = fits["or_static_bonus"]
    fits["or_variable_bonus"] = _fit_minmax(
        obs, "or_variable_bonus",
        extra_inits=[(pst.value_absent, pst.value_present,
                      np.full(len(obs.pairs), pst.bonus))], chain=False)
    return fits


def bonus_statistics(fit: NoiseModelFit) -> tuple[float, float | None, float | None]:
    """Bonus-strength summary: (static-equivalent bonus, lower and upper
    quartile of the per-pair bonuses).

    For a static fit the quartiles are ``None``.  For a variable fit the
    static equivalent is the min-squared-weighted mean of the per-pair
    bonuses — exactly the single bonus a static re-fit at the same levels
    would recover — and the quartiles use the linear-interpolation
    definition.
    """
    if fit.family == "or_static_bonus":
        _require(fit, "bonus")
        return float(fit.bonus), None, None
    if fit.family != "or_variable_bonus":
        raise ValueError(f"bonus statistics undefined for family {fit.family!r}")
    _require(fit, "pair_bonus", "pair_bonus_weight")
    pairs = sorted(fit.pair_bonus)
    if len(pairs) < 4:
        raise ValueError(f"need at least 4 pairs for quartiles, got {len(pairs)}")
    values = np.array([fit.pair_bonus[p] for p in pairs], dtype=np.float64)
    weights = np.array([fit.pair_bonus_weight[p] for p in pairs], dtype=np.float64)
    total = float(weights.sum())
    static = float(weights @ values) / total if total > 0.0 else float(values.mean())
    lo, hi = np.quantile(values, [0.25, 0.75])
    return static, float(lo), float(hi)


# ---------------------------------------------------------------------------
# generation


def generate_scores(labels, params: NoiseGenParams, family: str, pairs,
                    seed: int, image_ids=None, prompt_ids=None) -> ScoreMatrix:
    """Generate pair scores s = theta1 * f(labels) + theta0 + sigma * eps.

    ``labels`` is a LabelMatrix or (M, N) 0/1 array; ``pairs`` lists the
    (i, j) class pair behind each output column.  The noise stream depends
    only on the seed, so equal seeds give bit-identical output.
    """
    family = str(family)
    if family not in FAMILY_NAMES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILY_NAMES}")
    if isinstance(labels, LabelMatrix):
        lab = labels.values
        if image_ids is None:
            image_ids = labels.image_ids
    else:
        lab = np.asarray(labels, dtype=np.uint8)
    if lab.ndim != 2:
        raise ValueError("labels must be a 2-D matrix")
    n_images, n_classes = lab.shape
    pair_list = [_pair_tuple(p) for p in pairs]
    for i, j in pair_list:
        if j >= n_classes:
            raise ValueError(f"pair ({i}, {j}) references class >= {n_classes}")
    u = np.broadcast_to(params.value_absent, (n_classes,)) \
        if params.value_absent.size == 1 else params.value_absent
    v = np.broadcast_to(params.value_present, (n_classes,)) \
        if params.value_present.size == 1 else params.value_present
    if u.shape != (n_classes,):
        raise ValueError(f"value arrays have length {u.size}, expected {n_classes}")
    val = u[None, :] + lab * (v - u)[None, :]
    f = np.empty((n_images, len(pair_list)), dtype=np.float64)
    for k, (i, j) in enumerate(pair_list):
        x, z = val[:, i], val[:, j]
        if family == "constant":
            f[:, k] = params.constant
        elif family == "only_and":
            f[:, k] = np.minimum(x, z)
        elif family == "additive":
            f[:, k] = x + z
        elif family == "lut":
            if params.lut is None or (i, j) not in params.lut:
                raise ValueError(f"lut family needs a table for pair ({i}, {j})")
            f[:, k] = params.lut[(i, j)][lab[:, i], lab[:, j]]
        else:
            if family == "only_or":
                d = 0.0
            elif isinstance(params.bonus, dict):
                if (i, j) not in params.bonus:
                    raise ValueError(f"no bonus for pair ({i}, {j})")
                d = params.bonus[(i, j)]
            else:
                d = params.bonus
            f[:, k] = np.maximum(x, z) + d * np.minimum(x, z)
    theta0 = np.broadcast_to(np.asarray(params.theta0, dtype=np.float64), (n_images,))
    theta1 = np.broadcast_to(np.asarray(params.theta1, dtype=np.float64), (n_images,))
    eps = standard_normal(stream(seed, STREAM_PAIR_SCORES), size=(n_images, len(pair_list)))
    scores = theta1[:, None] * f + theta0[:, None] + params.sigma * eps
    if image_ids is None:
        image_ids = tuple(f"img{t:06d}" for t in range(n_images))
    if prompt_ids is None:
        prompt_ids = tuple(range(len(pair_list)))
    return ScoreMatrix(values=scores, image_ids=image_ids, prompt_ids=prompt_ids)
