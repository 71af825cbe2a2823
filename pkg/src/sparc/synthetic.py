"""Synthetic labeled datasets with a designated target class.

Labels follow a star dependence: class 0 is the target with prior
``target_prior``; every other class is present with probability
``cooccur_pos`` when the target is present and ``cooccur_neg`` when it is
not, independently given the target.  Scores are then generated from the
structural pair-score model on *flipped* copies of the labels (each cell
flipped with probability ``flip_prob``), while the bundle keeps the true
labels for evaluation — so recovering the target ranking from the scores is
exactly as hard as the label noise makes it.

Per-image offset and scale effects (``theta0``, ``theta1``) are drawn once
and shared by the singleton, auxiliary, and compound matrices, which is what
makes the debiasing chain able to remove them.

Everything is driven by counter-based named streams, so one seed pins the
entire bundle bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .core import (
    ClassVocabulary,
    LabelMatrix,
    PromptKind,
    PromptSpec,
    ScoreBundle,
    ScoreMatrix,
    validate_bundle,
)
from .noise_model import FAMILY_NAMES, NoiseGenParams, generate_scores
from .rng import bernoulli, lognormal, normal, standard_normal, stream, uniform

STREAM_LABELS = 0x4C41424C
STREAM_LABEL_FLIPS = 0x464C4950
STREAM_IMAGE_OFFSET = 0x4F464653
STREAM_IMAGE_SCALE = 0x53434C45
STREAM_SINGLETON_NOISE = 0x534E4F49
STREAM_AUX_NOISE = 0x414E4F49


@dataclass(frozen=True)
class SyntheticConfig:
    """Generation parameters.

    ``value_absent``/``value_present`` may be scalars (shared by all classes)
    or per-class sequences.  ``skip_validation`` is a test-only escape hatch
    for deliberately degenerate settings (for example ``cooccur_pos ==
    cooccur_neg`` to check independence).
    """

    n_classes: int
    n_images: int
    target_prior: float
    cooccur_pos: float
    cooccur_neg: float
    flip_prob: float
    family: str = "or_static_bonus"
    value_absent: float | tuple[float, ...] = 0.0
    value_present: float | tuple[float, ...] = 1.0
    bonus: float = 0.5
    noise_sd: float = 0.0
    image_offset_sd: float = 0.3
    image_scale_log_sd: float = 0.2
    seed: int = 0
    skip_validation: bool = False

    def __post_init__(self):
        if self.skip_validation:
            return
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_images < 1:
            raise ValueError(f"need at least 1 image, got {self.n_images}")
        if not 0.0 < self.target_prior < 1.0:
            raise ValueError(f"target_prior must be in (0, 1), got {self.target_prior}")
        if not 0.0 < self.cooccur_neg < self.cooccur_pos < 1.0:
            raise ValueError(
                "need 0 < cooccur_neg < cooccur_pos < 1, got "
                f"cooccur_neg={self.cooccur_neg}, cooccur_pos={self.cooccur_pos}")
        if not 0.0 <= self.flip_prob < 0.5:
            raise ValueError(f"flip_prob must be in [0, 1/2), got {self.flip_prob}")
        if self.family not in FAMILY_NAMES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.image_offset_sd < 0 or self.image_scale_log_sd < 0:
            raise ValueError("image effect SDs must be >= 0")

    def level_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        u = np.broadcast_to(np.asarray(self.value_absent, dtype=np.float64),
                            (self.n_classes,)).copy()
        v = np.broadcast_to(np.asarray(self.value_present, dtype=np.float64),
                            (self.n_classes,)).copy()
        return u, v


def sample_labels(config: SyntheticConfig) -> LabelMatrix:
    """Star-dependent labels: target first, the rest conditionally independent."""
    gen = stream(config.seed, STREAM_LABELS)
    draws = uniform(gen, (config.n_images, config.n_classes))
    labels = np.zeros((config.n_images, config.n_classes), dtype=np.uint8)
    labels[:, 0] = draws[:, 0] < config.target_prior
    rate = np.where(labels[:, 0] == 1, config.cooccur_pos, config.cooccur_neg)
    for c in range(1, config.n_classes):
        labels[:, c] = draws[:, c] < rate
    image_ids = tuple(f"img_{t:06d}" for t in range(config.n_images))
    return LabelMatrix(labels, image_ids)


def flip_labels(labels: LabelMatrix, flip_prob: float, seed: int) -> LabelMatrix:
    """Independently flip every cell with probability ``flip_prob``."""
    if not 0.0 <= flip_prob < 0.5:
        raise ValueError(f"flip_prob must be in [0, 1/2), got {flip_prob}")
    gen = stream(seed, STREAM_LABEL_FLIPS)
    flips = bernoulli(gen, flip_prob, labels.values.shape)
    return LabelMatrix(labels.values ^ flips, labels.image_ids)


def star_pair_prompts(n_classes: int) -> tuple[ClassVocabulary, tuple[PromptSpec, ...]]:
    """Vocabulary plus singleton, auxiliary, and (0, i) compound prompts."""
    names = [f"class_{i:02d}" for i in range(n_classes)]
    vocabulary = ClassVocabulary(names)
    prompts = [
        PromptSpec(i, f"a photo of a {names[i]}", PromptKind.SINGLETON, (i,))
        for i in range(n_classes)
    ]
    prompts += [
        PromptSpec(n_classes + i, names[i], PromptKind.AUXILIARY, (i,))
        for i in range(n_classes)
    ]
    base = 2 * n_classes
    for k in range(1, n_classes):
        prompts.append(PromptSpec(base + k - 1, f"{names[0]} and {names[k]}",
                                  PromptKind.COMPOUND, (0, k)))
    return vocabulary, tuple(prompts)


def build_synthetic_bundle(config: SyntheticConfig, vocabulary=None, prompts=None) -> ScoreBundle:
    """Full bundle: true labels attached, scores driven by flipped labels.

    A custom prompt set may be supplied; its compound prompts must all be
    2-class because scores come from the pair-score generator.
    """
    if (vocabulary is None) != (prompts is None):
        raise ValueError("supply vocabulary and prompts together or neither")
    if vocabulary is None:
        vocabulary, prompts = star_pair_prompts(config.n_classes)
    if len(vocabulary) != config.n_classes:
        raise ValueError(
            f"vocabulary has {len(vocabulary)} classes, config says {config.n_classes}")
    compound = [p for p in prompts if p.kind is PromptKind.COMPOUND]
    for p in compound:
        if len(p.class_set) != 2:
            raise ValueError(
                f"compound prompt {p.id} mentions {len(p.class_set)} classes; "
                "the pair-score generator needs exactly 2")

    labels = sample_labels(config)
    flipped = flip_labels(labels, config.flip_prob, config.seed)
    m = config.n_images
    theta0 = normal(stream(config.seed, STREAM_IMAGE_OFFSET),
                    0.0, config.image_offset_sd, m)
    theta1 = lognormal(stream(config.seed, STREAM_IMAGE_SCALE),
                       0.0, config.image_scale_log_sd, m)
    u, v = config.level_arrays()

    def class_matrix(noise_stream: int) -> np.ndarray:
        values = u[None, :] + flipped.values * (v - u)[None, :]
        eps = standard_normal(stream(config.seed, noise_stream), (m, config.n_classes))
        return theta1[:, None] * values + theta0[:, None] + config.noise_sd * eps

    singleton_prompts = [p for p in prompts if p.kind is PromptKind.SINGLETON]
    aux_prompts = [p for p in prompts if p.kind is PromptKind.AUXILIARY]
    singleton = ScoreMatrix(class_matrix(STREAM_SINGLETON_NOISE), labels.image_ids,
                            [p.id for p in singleton_prompts])
    auxiliary = ScoreMatrix(class_matrix(STREAM_AUX_NOISE), labels.image_ids,
                            [p.id for p in aux_prompts])
    gen_params = NoiseGenParams(
        value_absent=u, value_present=v, bonus=config.bonus,
        theta0=theta0, theta1=theta1, sigma=config.noise_sd)
    compound_matrix = generate_scores(
        flipped, gen_params, config.family, [p.class_set for p in compound],
        config.seed, prompt_ids=[p.id for p in compound])

    bundle = ScoreBundle(
        vocabulary=vocabulary,
        prompts=tuple(prompts),
        singleton=singleton,
        auxiliary=auxiliary,
        compound=compound_matrix,
        labels=labels,
        provenance={
            "source": "synthetic",
            "seed": str(config.seed),
            "family": config.family,
            "flip_prob": repr(float(config.flip_prob)),
            "noise_sd": repr(float(config.noise_sd)),
        },
    )
    violations = validate_bundle(bundle)
    if violations:
        raise AssertionError(f"generated bundle failed validation: {violations}")
    return bundle


# ---------------------------------------------------------------------------
# flat key-value config files

_FLOAT_FIELDS = {
    "target_prior", "cooccur_pos", "cooccur_neg", "flip_prob", "bonus",
    "noise_sd", "image_offset_sd", "image_scale_log_sd",
}
_INT_FIELDS = {"n_classes", "n_images", "seed"}
_LEVEL_FIELDS = {"value_absent", "value_present"}


def config_from_text(text: str) -> SyntheticConfig:
    """Parse a flat ``key = value`` file (one per line, ``#`` comments).

    ``value_absent``/``value_present`` accept a single number or a
    comma-separated per-class list.
    """
    known = {f.name for f in fields(SyntheticConfig)}
    kwargs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known or key == "skip_validation":
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in kwargs:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _INT_FIELDS:
                kwargs[key] = int(value)
            elif key in _FLOAT_FIELDS:
                kwargs[key] = float(value)
            elif key in _LEVEL_FIELDS:
                parts = [p for p in value.split(",") if p.strip()]
                if len(parts) == 1:
                    kwargs[key] = float(parts[0])
                else:
                    kwargs[key] = tuple(float(p) for p in parts)
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    missing = {"n_classes", "n_images", "target_prior", "cooccur_pos",
               "cooccur_neg", "flip_prob"} - set(kwargs)
    if missing:
        raise ValueError(f"config missing required keys: {sorted(missing)}")
    return SyntheticConfig(**kwargs)


def load_config(path) -> SyntheticConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))
