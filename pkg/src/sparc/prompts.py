"""Compound prompt generation from co-occurrence statistics.

Pairs: for every ordered class pair ``i < j`` whose conditional
``P(j | i)`` exceeds the pair threshold, emit one pair prompt from the
pair template.  Triplets: for each accepted pair, the most likely third
class ``k`` (by ``P(k | i, j)``) yields a triplet prompt when that
conditional exceeds the triplet threshold.  Two different pairs can
propose the same three-class set; only one triplet per class set
survives — the one whose generating pair had the larger conditional,
ties going to the lexicographically smallest generating pair.

Output order is deterministic: sorted by (class_set, text), ids assigned
sequentially from ``start_id``.  Raising either threshold never adds
prompts.

The randomized ablation prompts ("A photo of a {class}, which is
{random string}") exercise the pipeline with compound prompts whose
extra token carries no signal; bundles built from them set the
``randomized`` provenance flag so single-class compound prompts pass
validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ClassVocabulary, CooccurrenceStats, PromptKind, PromptSpec
from .rng import stream

__all__ = [
    "PromptGenConfig",
    "PromptTemplateError",
    "builtin_pair_templates",
    "generate_compound_prompts",
    "generate_randomized_prompts",
    "RANDOMIZED_TEMPLATE",
    "STREAM_RANDOMIZED_PROMPTS",
]

DEFAULT_PAIR_TEMPLATE = "{A} and {B}"
DEFAULT_TRIPLET_TEMPLATE = "{A}, {B}, and {C}"
RANDOMIZED_TEMPLATE = "A photo of a {name}, which is {rand}"

STREAM_RANDOMIZED_PROMPTS = 0x52414E44  # "RAND"

_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


class PromptTemplateError(ValueError):
    """A template string is missing a slot or repeats one."""


def builtin_pair_templates() -> tuple[str, ...]:
    """The built-in two-class phrasings (conjunction first, the default)."""
    return (
        "{A} and {B}",
        "{A} or {B}",
        "{A} with {B}",
        "{A} next to {B}",
        "{A} and not {B}",
    )


def _check_template(template: str, slots: Sequence[str]) -> None:
    for slot in slots:
        token = "{" + slot + "}"
        count = template.count(token)
        if count != 1:
            raise PromptTemplateError(
                f"template {template!r} must contain {token} exactly once, found {count}"
            )


@dataclass(frozen=True)
class PromptGenConfig:
    """Thresholds, templates, and extra prompts for compound generation.

    ``pair_threshold`` gates P(j|i); ``triplet_threshold`` gates
    P(k|i,j).  The defaults (0.1 and 0.3) are practical starting points,
    not calibrated constants; tune them per dataset.  ``extra_prompts``
    is a hook for externally produced compound prompts (descriptive
    phrasings etc.) that are appended after generation.
    """

    pair_threshold: float = 0.1
    triplet_threshold: float = 0.3
    pair_template: str = DEFAULT_PAIR_TEMPLATE
    triplet_template: str = DEFAULT_TRIPLET_TEMPLATE
    extra_prompts: tuple[PromptSpec, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        for name, value in (("pair_threshold", self.pair_threshold), ("triplet_threshold", self.triplet_threshold)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        _check_template(self.pair_template, ("A", "B"))
        _check_template(self.triplet_template, ("A", "B", "C"))
        object.__setattr__(self, "extra_prompts", tuple(self.extra_prompts))


def generate_compound_prompts(
    vocabulary: ClassVocabulary,
    stats: CooccurrenceStats,
    config: PromptGenConfig | None = None,
    start_id: int = 0,
) -> list[PromptSpec]:
    """Emit pair and triplet prompts for frequently co-occurring classes."""
    config = config or PromptGenConfig()
    n = len(vocabulary)
    if n < 2:
        raise ValueError(f"vocabulary needs at least 2 classes to form pairs, got {n}")
    if stats.n_classes != n:
        raise ValueError(
            f"co-occurrence table covers {stats.n_classes} classes, vocabulary has {n}"
        )
    names = vocabulary.names

    pairs: list[tuple[int, int]] = []
    # class_set -> (generating conditional, generating pair, third class)
    triplets: dict[tuple[int, int, int], tuple[float, tuple[int, int], int]] = {}
    for i in range(n - 1):
        for j in range(i + 1, n):
            if stats.pair_cond[i, j] <= config.pair_threshold:
                continue
            pairs.append((i, j))
            third = stats.third_class_probs(i, j)
            best_k, best_p = -1, -np.inf
            for k, p in third.items():
                if k in (i, j) or not 0 <= k < n:
                    continue
                if p > best_p or (p == best_p and k < best_k):
                    best_k, best_p = k, p
            if best_k >= 0 and best_p > config.triplet_threshold:
                class_set = tuple(sorted((i, j, best_k)))
                held = triplets.get(class_set)
                # larger conditional wins; the i<j scan order makes the first
                # equal entry the lexicographically smallest generating pair
                if held is None or best_p > held[0]:
                    triplets[class_set] = (best_p, (i, j), best_k)

    drafts: list[tuple[tuple[int, ...], str]] = []
    for i, j in pairs:
        text = config.pair_template.format(A=names[i], B=names[j])
        drafts.append(((i, j), text))
    for class_set, (_, (i, j), k) in triplets.items():
        text = config.triplet_template.format(A=names[i], B=names[j], C=names[k])
        drafts.append((class_set, text))
    for p in config.extra_prompts:
        if p.kind is not PromptKind.COMPOUND:
            raise ValueError(f"extra prompt {p.id} must be compound, got {p.kind.value}")
        if not 2 <= len(p.class_set) <= 3:
            raise ValueError(f"extra prompt {p.id} must mention 2 or 3 classes, got {len(p.class_set)}")
        if any(not 0 <= c < n for c in p.class_set):
            raise ValueError(f"extra prompt {p.id} references a class outside the vocabulary")
        drafts.append((p.class_set, p.text))

    seen: set[tuple[tuple[int, ...], str]] = set()
    unique = []
    for key in drafts:
        if key not in seen:
            seen.add(key)
            unique.append(key)
    unique.sort()
    return [
        PromptSpec(start_id + idx, text, PromptKind.COMPOUND, class_set)
        for idx, (class_set, text) in enumerate(unique)
    ]


def generate_randomized_prompts(
    vocabulary: ClassVocabulary,
    per_class: int,
    rand_len: int,
    seed: int,
    start_id: int = 0,
) -> list[PromptSpec]:
    """Ablation prompts pairing each class with a random letter string.

    Deterministic in ``(seed, vocabulary, per_class, rand_len)``: the
    random suffixes come from the dedicated prompt stream, consumed in
    class-major order.  Prompts are tagged compound with a single-class
    class set; bundles holding them should set provenance
    ``randomized=true``.
    """
    if per_class < 1 or rand_len < 1:
        raise ValueError("per_class and rand_len must be >= 1")
    gen = stream(seed, STREAM_RANDOMIZED_PROMPTS)
    draws = gen.random((len(vocabulary), per_class, rand_len))
    letters = np.minimum((draws * len(_ALPHABET)).astype(np.int64), len(_ALPHABET) - 1)
    out: list[PromptSpec] = []
    next_id = start_id
    for i, name in enumerate(vocabulary.names):
        for r in range(per_class):
            suffix = "".join(_ALPHABET[k] for k in letters[i, r])
            out.append(
                PromptSpec(
                    next_id,
                    RANDOMIZED_TEMPLATE.format(name=name, rand=suffix),
                    PromptKind.COMPOUND,
                    (i,),
                )
            )
            next_id += 1
    return out
