"""Core domain types for score bundles.

A bundle carries everything one scoring run produced for one image
collection: the class vocabulary, the prompt table, three score matrices
(singleton, auxiliary, compound), and optionally ground-truth labels.
Construction is deliberately permissive; :func:`validate_bundle` reports
every broken invariant as data so callers can decide what is fatal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

__all__ = [
    "PromptKind",
    "ClassVocabulary",
    "PromptSpec",
    "ScoreMatrix",
    "LabelMatrix",
    "CooccurrenceStats",
    "ScoreBundle",
    "validate_bundle",
    "bundles_equal",
]


class PromptKind(str, Enum):
    SINGLETON = "singleton"
    AUXILIARY = "auxiliary"
    COMPOUND = "compound"


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names; the position of a name is its class index."""

    names: tuple[str, ...]

    def __init__(self, names: Iterable[str]) -> None:
        object.__setattr__(self, "names", tuple(str(n) for n in names))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class PromptSpec:
    """One prompt: stable integer id, text, kind, and the classes it mentions.

    ``class_set`` is stored sorted ascending; its meaning is positional
    against the bundle's vocabulary.
    """

    id: int
    text: str
    kind: PromptKind
    class_set: tuple[int, ...]

    def __init__(self, id: int, text: str, kind: PromptKind | str, class_set: Iterable[int]) -> None:
        object.__setattr__(self, "id", int(id))
        object.__setattr__(self, "text", str(text))
        object.__setattr__(self, "kind", PromptKind(kind))
        object.__setattr__(self, "class_set", tuple(sorted(int(c) for c in class_set)))

    def mentions(self, class_index: int) -> bool:
        return class_index in self.class_set


def _as_float2d(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Dense image-by-prompt score block.

    ``values`` is float64, images on rows.  ``stage`` records how far the
    scores are through the debiasing chain: ``raw``, ``image_debiased``,
    or ``debiased``; it is informational and not serialized.
    """

    values: np.ndarray
    image_ids: tuple[str, ...]
    prompt_ids: tuple[int, ...]
    stage: str = "raw"

    def __init__(self, values, image_ids: Iterable[str], prompt_ids: Iterable[int], stage: str = "raw") -> None:
        a = _as_float2d(values)
        a.flags.writeable = False
        object.__setattr__(self, "values", a)
        object.__setattr__(self, "image_ids", tuple(str(i) for i in image_ids))
        object.__setattr__(self, "prompt_ids", tuple(int(p) for p in prompt_ids))
        object.__setattr__(self, "stage", str(stage))

    @property
    def n_images(self) -> int:
        return self.values.shape[0]

    @property
    def n_prompts(self) -> int:
        return self.values.shape[1]

    def column(self, prompt_id: int) -> np.ndarray:
        return self.values[:, self.prompt_ids.index(prompt_id)]


@dataclass(frozen=True, eq=False)
class LabelMatrix:
    """Binary image-by-class label block (uint8, 0/1 expected)."""

    values: np.ndarray
    image_ids: tuple[str, ...]

    def __init__(self, values, image_ids: Iterable[str]) -> None:
        a = np.asarray(values, dtype=np.uint8)
        if a.ndim != 2:
            raise ValueError(f"label matrix must be 2-D, got shape {a.shape}")
        a.flags.writeable = False
        object.__setattr__(self, "values", a)
        object.__setattr__(self, "image_ids", tuple(str(i) for i in image_ids))

    @property
    def n_images(self) -> int:
        return self.values.shape[0]

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class CooccurrenceStats:
    """Empirical co-occurrence tables driving compound-prompt selection.

    ``pair_cond[i, j]`` is P(class j present | class i present).  Triplet
    conditionals are sparse: ``triplet_cond`` maps an unordered pair key
    ``(i, j)`` with ``i < j`` to a dict ``{k: P(k present | i and j present)}``.
    """

    pair_cond: np.ndarray
    triplet_cond: dict[tuple[int, int], dict[int, float]] = field(default_factory=dict)

    def __init__(self, pair_cond, triplet_cond: dict | None = None) -> None:
        a = np.asarray(pair_cond, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"pair_cond must be square, got shape {a.shape}")
        a.flags.writeable = False
        object.__setattr__(self, "pair_cond", a)
        table: dict[tuple[int, int], dict[int, float]] = {}
        for key, probs in (triplet_cond or {}).items():
            i, j = sorted(int(c) for c in key)
            table[(i, j)] = {int(k): float(p) for k, p in probs.items()}
        object.__setattr__(self, "triplet_cond", table)

    @property
    def n_classes(self) -> int:
        return self.pair_cond.shape[0]

    def third_class_probs(self, i: int, j: int) -> dict[int, float]:
        lo, hi = (i, j) if i < j else (j, i)
        return self.triplet_cond.get((lo, hi), {})


@dataclass(frozen=True, eq=False)
class ScoreBundle:
    """One scoring run: vocabulary, prompts, three matrices, optional labels."""

    vocabulary: ClassVocabulary
    prompts: tuple[PromptSpec, ...]
    singleton: ScoreMatrix
    auxiliary: ScoreMatrix
    compound: ScoreMatrix
    labels: LabelMatrix | None = None
    provenance: dict[str, str] = field(default_factory=dict)

    def __init__(
        self,
        vocabulary: ClassVocabulary,
        prompts: Iterable[PromptSpec],
        singleton: ScoreMatrix,
        auxiliary: ScoreMatrix,
        compound: ScoreMatrix,
        labels: LabelMatrix | None = None,
        provenance: dict[str, str] | None = None,
    ) -> None:
        object.__setattr__(self, "vocabulary", vocabulary)
        object.__setattr__(self, "prompts", tuple(prompts))
        object.__setattr__(self, "singleton", singleton)
        object.__setattr__(self, "auxiliary", auxiliary)
        object.__setattr__(self, "compound", compound)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", dict(provenance or {}))

    @property
    def n_classes(self) -> int:
        return len(self.vocabulary)

    @property
    def n_images(self) -> int:
        return self.singleton.n_images

    def prompt_by_id(self, prompt_id: int) -> PromptSpec:
        for p in self.prompts:
            if p.id == prompt_id:
                return p
        raise KeyError(f"no prompt with id {prompt_id}")

    def compound_prompts(self) -> tuple[PromptSpec, ...]:
        return tuple(p for p in self.prompts if p.kind is PromptKind.COMPOUND)

    def allows_single_class_compounds(self) -> bool:
        """Randomized ablation runs mark themselves in provenance; their
        compound prompts legitimately mention a single class."""
        return self.provenance.get("randomized", "").lower() == "true"


def _first_nonfinite(values: np.ndarray) -> tuple[int, int] | None:
    bad = ~np.isfinite(values)
    if not bad.any():
        return None
    r, c = np.unravel_index(int(np.argmax(bad)), values.shape)
    return int(r), int(c)


def validate_bundle(bundle: ScoreBundle) -> list[str]:
    """Check every bundle invariant; return one message per violation.

    Pure: never raises for content problems and never mutates the bundle.
    An empty list means the bundle is well-formed.
    """
    problems: list[str] = []
    n = len(bundle.vocabulary)

    if n < 2:
        problems.append(f"vocabulary: needs at least 2 classes, found {n}")
    seen_names: dict[str, int] = {}
    for idx, name in enumerate(bundle.vocabulary.names):
        if not name:
            problems.append(f"vocabulary: class {idx} has an empty name")
        if name in seen_names:
            problems.append(
                f"vocabulary: duplicate class name {name!r} at indices {seen_names[name]} and {idx}"
            )
        else:
            seen_names[name] = idx

    by_id: dict[int, PromptSpec] = {}
    seen_keys: set[tuple] = set()
    allow_single = bundle.allows_single_class_compounds()
    for p in bundle.prompts:
        if p.id in by_id:
            problems.append(f"prompts: duplicate prompt id {p.id}")
        else:
            by_id[p.id] = p
        key = (p.kind.value, p.class_set, p.text)
        if key in seen_keys:
            problems.append(
                f"prompts: duplicate (kind, class_set, text) = ({p.kind.value}, {p.class_set}, {p.text!r})"
            )
        seen_keys.add(key)
        for c in p.class_set:
            if not 0 <= c < n:
                problems.append(f"prompts: prompt {p.id} references class index {c} outside [0, {n})")
        if p.kind in (PromptKind.SINGLETON, PromptKind.AUXILIARY):
            if len(p.class_set) != 1:
                problems.append(
                    f"prompts: {p.kind.value} prompt {p.id} must mention exactly 1 class, got {len(p.class_set)}"
                )
        else:
            lo = 1 if allow_single else 2
            if not lo <= len(p.class_set) <= 3:
                problems.append(
                    f"prompts: compound prompt {p.id} must mention {lo}..3 classes, got {len(p.class_set)}"
                )

    matrices = (
        ("singleton", bundle.singleton, PromptKind.SINGLETON),
        ("auxiliary", bundle.auxiliary, PromptKind.AUXILIARY),
        ("compound", bundle.compound, PromptKind.COMPOUND),
    )
    ref_ids = bundle.singleton.image_ids
    for mat_name, mat, kind in matrices:
        if mat.values.shape != (len(mat.image_ids), len(mat.prompt_ids)):
            problems.append(
                f"{mat_name}: shape {mat.values.shape} disagrees with "
                f"{len(mat.image_ids)} image ids x {len(mat.prompt_ids)} prompt ids"
            )
            continue
        loc = _first_nonfinite(mat.values)
        if loc is not None:
            r, c = loc
            problems.append(f"{mat_name}: non-finite score at row {r}, column {c}")
        if mat.image_ids != ref_ids:
            problems.append(f"{mat_name}: image ids differ from singleton matrix image ids")
        if len(set(mat.prompt_ids)) != len(mat.prompt_ids):
            problems.append(f"{mat_name}: duplicate prompt ids in column order")
        for pid in mat.prompt_ids:
            p = by_id.get(pid)
            if p is None:
                problems.append(f"{mat_name}: column references unknown prompt id {pid}")
            elif p.kind is not kind:
                problems.append(
                    f"{mat_name}: column prompt {pid} has kind {p.kind.value}, expected {kind.value}"
                )

    for mat_name, mat, kind in matrices[:2]:
        cols = [by_id[pid].class_set for pid in mat.prompt_ids if pid in by_id and by_id[pid].kind is kind]
        if len(cols) == len(mat.prompt_ids):
            expected = [(i,) for i in range(n)]
            if cols != expected:
                problems.append(
                    f"{mat_name}: columns must cover each class once in class order 0..{n - 1}"
                )

    if bundle.labels is not None:
        lab = bundle.labels
        if lab.image_ids != ref_ids:
            problems.append("labels: image ids differ from singleton matrix image ids")
        if lab.values.shape != (len(lab.image_ids), n):
            problems.append(
                f"labels: shape {lab.values.shape} disagrees with {len(lab.image_ids)} images x {n} classes"
            )
        elif lab.values.size and lab.values.max(initial=0) > 1:
            r, c = np.unravel_index(int(np.argmax(lab.values > 1)), lab.values.shape)
            problems.append(f"labels: entry at row {r}, column {c} is not 0/1")

    return problems


def bundles_equal(a: ScoreBundle, b: ScoreBundle) -> bool:
    """Exact equality of content (array bits, ids, prompts, provenance)."""
    if a.vocabulary.names != b.vocabulary.names or a.prompts != b.prompts:
        return False
    for ma, mb in ((a.singleton, b.singleton), (a.auxiliary, b.auxiliary), (a.compound, b.compound)):
        if ma.image_ids != mb.image_ids or ma.prompt_ids != mb.prompt_ids:
            return False
        if ma.values.shape != mb.values.shape or not np.array_equal(ma.values, mb.values):
            return False
    if (a.labels is None) != (b.labels is None):
        return False
    if a.labels is not None and b.labels is not None:
        if a.labels.image_ids != b.labels.image_ids or not np.array_equal(a.labels.values, b.labels.values):
            return False
    return a.provenance == b.provenance
