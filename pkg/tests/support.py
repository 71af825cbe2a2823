"""Shared helpers for the test suite: random parameter draws and tiny bundles."""

from __future__ import annotations

import numpy as np

from sparc.core import (
    ClassVocabulary,
    LabelMatrix,
    PromptKind,
    PromptSpec,
    ScoreBundle,
    ScoreMatrix,
)
from sparc.theory import TheoryParams


def draw_theory_params(gen: np.random.Generator, m_lo: int = 2, m_hi: int = 60) -> TheoryParams:
    """A random valid parameter set: rates bounded away from 0/1, joint from
    a flat Dirichlet, pair count uniform on [m_lo, m_hi]."""
    rho = 0.05 + 0.85 * gen.random()
    q = rho * (0.05 + 0.9 * gen.random())
    nu = 0.45 * gen.random()
    m = int(gen.integers(m_lo, m_hi + 1))
    e = -np.log(gen.random(4))
    pi = e / e.sum()
    return TheoryParams(
        cooccur_pos=rho,
        cooccur_neg=q,
        flip_prob=nu,
        n_pairs=m,
        pi11=float(pi[0]),
        pi10=float(pi[1]),
        pi01=float(pi[2]),
        pi00=float(pi[3]),
    )


def standard_prompts(n_classes: int, pair_list: list[tuple[int, int]]) -> list[PromptSpec]:
    """Singleton + auxiliary prompts for every class, then pair compounds."""
    names = [f"class_{i:02d}" for i in range(n_classes)]
    prompts = [
        PromptSpec(i, f"a photo of a {names[i]}", PromptKind.SINGLETON, (i,)) for i in range(n_classes)
    ]
    prompts += [
        PromptSpec(n_classes + i, names[i], PromptKind.AUXILIARY, (i,)) for i in range(n_classes)
    ]
    base = 2 * n_classes
    for t, (i, j) in enumerate(pair_list):
        prompts.append(
            PromptSpec(base + t, f"{names[i]} and {names[j]}", PromptKind.COMPOUND, (i, j))
        )
    return prompts


def random_bundle(
    gen: np.random.Generator,
    n_images: int = 6,
    n_classes: int = 4,
    pair_list: list[tuple[int, int]] | None = None,
    with_labels: bool = True,
    provenance: dict[str, str] | None = None,
) -> ScoreBundle:
    """A small well-formed bundle with float32-representable random scores."""
    if pair_list is None:
        pair_list = [(0, 1), (0, 2), (1, 2), (2, 3)]
    prompts = standard_prompts(n_classes, pair_list)
    image_ids = [f"img_{t:03d}" for t in range(n_images)]

    def mat(kind: PromptKind) -> ScoreMatrix:
        ids = [p.id for p in prompts if p.kind is kind]
        # draw in float32 so a write/read round trip is lossless
        values = gen.standard_normal((n_images, len(ids))).astype(np.float32).astype(np.float64)
        return ScoreMatrix(values, image_ids, ids)

    labels = None
    if with_labels:
        labels = LabelMatrix((gen.random((n_images, n_classes)) < 0.5).astype(np.uint8), image_ids)
    return ScoreBundle(
        vocabulary=ClassVocabulary([f"class_{i:02d}" for i in range(n_classes)]),
        prompts=prompts,
        singleton=mat(PromptKind.SINGLETON),
        auxiliary=mat(PromptKind.AUXILIARY),
        compound=mat(PromptKind.COMPOUND),
        labels=labels,
        provenance=provenance or {"origin": "test"},
    )


def ablation_rows(seeds=range(10)) -> list[tuple[int, float, float, float, float]]:
    """Reference ablation: star bundles large enough that keeping the
    second-largest compound score should beat keeping the largest.

    Returns one row per seed:
    ``(seed, ap_top1, ap_top2, map_singleton, map_maxvariance_merge)``.
    """
    from sparc.debias import debias_bundle
    from sparc.fusion import fuse_kmax, order_statistics, sparc_pipeline
    from sparc.metrics import average_precision, mean_average_precision
    from sparc.synthetic import SyntheticConfig, build_synthetic_bundle

    rows = []
    for seed in seeds:
        config = SyntheticConfig(
            n_classes=20, n_images=2000, target_prior=0.5, cooccur_pos=0.6,
            cooccur_neg=0.05, flip_prob=0.1, family="or_static_bonus",
            bonus=0.5, noise_sd=0.5, seed=seed)
        bundle = build_synthetic_bundle(config)
        target = bundle.labels.values[:, 0]
        _, compound_debiased, _ = debias_bundle(bundle)
        table = order_statistics(compound_debiased, bundle.prompts, 0)
        ap_top1 = average_precision(fuse_kmax(table, 1), target)
        ap_top2 = average_precision(fuse_kmax(table, 2), target)
        map_single = mean_average_precision(
            sparc_pipeline(bundle, "singleton"), bundle.labels.values).mean_ap
        map_merge = mean_average_precision(
            sparc_pipeline(bundle, "maxvariance"), bundle.labels.values).mean_ap
        rows.append((int(seed), ap_top1, ap_top2, map_single, map_merge))
    return rows
