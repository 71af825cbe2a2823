"""Command-line front end.

One executable, verb subcommands:

* ``gen-prompts``  — compound prompt texts from a vocabulary + co-occurrence CSV
* ``simulate``     — synthetic labeled bundle from a flat config file
* ``fuse``         — debias a bundle and write refined class scores
* ``eval``         — average-precision report for a bundle (or a refined CSV)
* ``fit-noise``    — fit every score-composition family and report FVU
* ``theory``       — win-rate difference tables: closed form, Monte Carlo, bounds

Exit codes: 0 success, 1 usage or data error, 2 internal invariant
violation.  Data errors print one ``error: <reason>`` line on stderr.
All tabular output is CSV with a fixed column order; files are written
atomically (temp file + rename).  ``SPARC_SEED`` provides a global seed
fallback wherever a ``--seed`` flag is not given.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle_io import (
    BundleIOError,
    read_bundle,
    read_prompts_csv,
    write_bundle,
    write_prompts_csv,
    write_text_atomic,
)
from .core import ClassVocabulary, CooccurrenceStats, PromptKind, validate_bundle
from .debias import DegenerateDistributionError, debias_bundle
from .fusion import parse_strategy, sparc_pipeline
from .metrics import UndefinedAPError, mean_average_precision
from .noise_model import (
    FAMILY_NAMES,
    NoiseFitError,
    PairObservations,
    bonus_statistics,
    fit_all_families,
    fit_noise_model,
)
from .prompts import PromptGenConfig, generate_compound_prompts, generate_randomized_prompts
from .synthetic import build_synthetic_bundle, load_config
from .theory import (
    TheoryParams,
    min_prompts_for_advantage,
    win_rate_difference_closed_form,
    win_rate_monte_carlo,
)

log = logging.getLogger("sparc")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INTERNAL = 2

_DATA_ERRORS = (
    BundleIOError,
    DegenerateDistributionError,
    NoiseFitError,
    UndefinedAPError,
    ValueError,
    OSError,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; our contract reserves 2 for bugs."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_ERROR)


def default_seed() -> int:
    raw = os.environ.get("SPARC_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"SPARC_SEED must be an integer, got {raw!r}") from None


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count() or 1,
        help="worker threads (results are thread-count invariant; default: all cores)",
    )


def _positive_path(value: str) -> Path:
    path = Path(value)
    if not path.exists():
        raise argparse.ArgumentTypeError(f"path does not exist: {value}")
    return path


# ---------------------------------------------------------------------------
# gen-prompts


def _read_vocab(path: Path) -> ClassVocabulary:
    names = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(names) < 2:
        raise ValueError(f"{path}: vocabulary needs at least 2 class names, found {len(names)}")
    return ClassVocabulary(names)


def _read_cooc(pair_path: Path, triplet_path: Path | None, n: int) -> CooccurrenceStats:
    with pair_path.open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    try:
        table = np.array([[float(cell) for cell in row] for row in rows], dtype=np.float64)
    except ValueError:
        raise ValueError(f"{pair_path}: co-occurrence CSV must be all numeric (no header)") from None
    if table.shape != (n, n):
        raise ValueError(f"{pair_path}: expected a {n}x{n} table, got {table.shape[0]}x{table.shape[1]}")

    triplets: dict[tuple[int, int], dict[int, float]] = {}
    if triplet_path is not None:
        with triplet_path.open(newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or not any(cell.strip() for cell in row):
                    continue
                if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                    continue  # header row
                if len(row) != 4:
                    raise ValueError(f"{triplet_path}:{lineno}: expected i,j,k,prob")
                i, j, k = (int(cell) for cell in row[:3])
                prob = float(row[3])
                triplets.setdefault(tuple(sorted((i, j))), {})[k] = prob
    return CooccurrenceStats(table, triplets)


def cmd_gen_prompts(args) -> int:
    vocab = _read_vocab(args.vocab)
    stats = _read_cooc(args.cooc, args.triplets, len(vocab))
    config = PromptGenConfig(
        pair_threshold=args.pair_threshold,
        triplet_threshold=args.triplet_threshold,
        pair_template=args.pair_template,
        triplet_template=args.triplet_template,
    )
    start = 2 * len(vocab) if args.start_id is None else args.start_id
    prompts = generate_compound_prompts(vocab, stats, config, start_id=start)
    if args.randomized_per_class:
        prompts += generate_randomized_prompts(
            vocab,
            args.randomized_per_class,
            args.rand_len,
            args.seed if args.seed is not None else default_seed(),
            start_id=start + len(prompts),
        )
    write_prompts_csv(args.out, prompts)
    log.info("wrote %d prompts to %s", len(prompts), args.out)
    print(f"{len(prompts)} prompts -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _config_names_seed(path: Path) -> bool:
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith("seed") and "=" in line:
            return True
    return False


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    elif "SPARC_SEED" in os.environ and not _config_names_seed(args.config):
        config = dataclasses.replace(config, seed=default_seed())
    bundle = build_synthetic_bundle(config)
    write_bundle(bundle, args.out, force=args.force)
    print(
        f"bundle -> {args.out} ({bundle.n_images} images, "
        f"{len(bundle.vocabulary)} classes, {bundle.compound.values.shape[1]} compound prompts)"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse


def _refined_csv(names, image_ids, refined: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", *names])
    for t, image_id in enumerate(image_ids):
        writer.writerow([image_id] + [repr(float(x)) for x in refined[t]])
    return buf.getvalue()


def _stats_csv(stats) -> str:
    rows = ["stage,matrix,index,mean,sd"]
    for stage, mean_d, sd_d in (
        ("image", stats.image_mean, stats.image_sd),
        ("prompt", stats.prompt_mean, stats.prompt_sd),
    ):
        for matrix in sorted(mean_d):
            mean, sd = mean_d[matrix], sd_d[matrix]
            for idx in range(mean.shape[0]):
                rows.append(f"{stage},{matrix},{idx},{float(mean[idx])!r},{float(sd[idx])!r}")
    return "\n".join(rows) + "\n"


def cmd_fuse(args) -> int:
    parse_strategy(args.strategy)  # fail fast before the bundle loads
    bundle = read_bundle(args.bundle)
    refined = sparc_pipeline(bundle, args.strategy, merge_fused=not args.no_merge)
    _, _, stats = debias_bundle(bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / "refined.csv", _refined_csv(bundle.vocabulary.names, bundle.singleton.image_ids, refined))
    write_text_atomic(out / "debias_stats.csv", _stats_csv(stats))
    print(f"refined scores -> {out / 'refined.csv'} (strategy {args.strategy})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _read_refined_csv(path: Path, bundle) -> np.ndarray:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "image_id":
            raise ValueError(f"{path}: first column must be image_id")
        if tuple(header[1:]) != bundle.vocabulary.names:
            raise ValueError(f"{path}: class columns do not match the bundle vocabulary")
        rows = {row[0]: [float(x) for x in row[1:]] for row in reader if row}
    missing = [i for i in bundle.singleton.image_ids if i not in rows]
    if missing:
        raise ValueError(f"{path}: missing scores for image ids {missing[:5]}")
    return np.array([rows[i] for i in bundle.singleton.image_ids], dtype=np.float64)


def _eval_csv(report, names) -> str:
    rows = ["row_type,class_index,class_name,average_precision"]
    for idx, ap in enumerate(report.per_class_ap):
        cell = "" if ap is None else repr(ap)
        rows.append(f"class,{idx},{names[idx]},{cell}")
    rows.append(f"mean,,,{report.mean_ap!r}")
    return "\n".join(rows) + "\n"


def cmd_eval(args) -> int:
    bundle = read_bundle(args.bundle)
    if bundle.labels is None:
        raise ValueError("bundle has no labels; evaluation needs ground truth")
    if args.scores is not None:
        refined = _read_refined_csv(args.scores, bundle)
        method = f"file:{args.scores.name}"
    else:
        refined = sparc_pipeline(bundle, args.strategy)
        method = args.strategy
    report = mean_average_precision(refined, bundle.labels.values, method=method)
    text = _eval_csv(report, bundle.vocabulary.names)
    if args.out is not None:
        write_text_atomic(args.out, text)
        print(f"evaluation ({method}) -> {args.out}: mean AP {report.mean_ap:.6f}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-noise


def _fit_report_csv(fits) -> str:
    rows = ["family,fvu,bonus_static,bonus_q25,bonus_q75,flags"]
    for fit in fits:
        cells = ["", "", ""]
        if fit.family in ("or_static_bonus", "or_variable_bonus"):
            try:
                static, lo, hi = bonus_statistics(fit)
            except ValueError:
                # too few pairs for quartiles; the bonus itself still reports
                cells[0] = repr(fit.bonus) if np.isscalar(fit.bonus) else ""
            else:
                cells = [repr(static), "" if lo is None else repr(lo), "" if hi is None else repr(hi)]
        flags = ";".join(fit.flags)
        rows.append(f"{fit.family},{fit.fvu!r},{cells[0]},{cells[1]},{cells[2]},{flags}")
    return "\n".join(rows) + "\n"


def cmd_fit_noise(args) -> int:
    bundle = read_bundle(args.bundle)
    obs = PairObservations.from_bundle(bundle, debias=not args.raw)
    if args.families == "all":
        by_name = fit_all_families(obs)
        fits = [by_name[name] for name in FAMILY_NAMES]
    else:
        wanted = [f.strip() for f in args.families.split(",") if f.strip()]
        unknown = [f for f in wanted if f not in FAMILY_NAMES]
        if unknown:
            raise ValueError(f"unknown families {unknown}; choose from {list(FAMILY_NAMES)}")
        fits = [fit_noise_model(obs, f) for f in wanted]
    text = _fit_report_csv(fits)
    if args.out is not None:
        write_text_atomic(args.out, text)
        best = min(fits, key=lambda f: f.fvu)
        print(f"fit report -> {args.out}: best family {best.family} (FVU {best.fvu:.6f})")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# theory


def _parse_m_range(text: str) -> list[int]:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ValueError(f"--sweep-m wants LO:HI, got {text!r}")
    try:
        lo_i, hi_i = int(lo), int(hi)
    except ValueError:
        raise ValueError(f"--sweep-m wants integer bounds, got {text!r}") from None
    if lo_i < 1 or hi_i < lo_i:
        raise ValueError(f"--sweep-m needs 1 <= LO <= HI, got {text!r}")
    return list(range(lo_i, hi_i + 1))


def _pi_cells(args) -> tuple[float, float, float, float]:
    explicit = [args.pi11, args.pi10, args.pi01, args.pi00]
    if any(p is not None for p in explicit):
        if any(p is None for p in explicit):
            raise ValueError("give all four of --pi11/--pi10/--pi01/--pi00 or none")
        return tuple(explicit)
    p = args.pos_marginal
    if not 0.0 < p < 1.0:
        raise ValueError(f"--pos-marginal must be in (0, 1), got {p}")
    return (p * (1 - p), p * p, (1 - p) * (1 - p), p * (1 - p))


def cmd_theory(args) -> int:
    nus = [float(tok) for tok in args.nu.split(",") if tok.strip()]
    if not nus:
        raise ValueError("--nu needs at least one flip probability")
    pi11, pi10, pi01, pi00 = _pi_cells(args)
    m_values = [args.m] if args.m is not None else _parse_m_range(args.sweep_m)
    seed = args.seed if args.seed is not None else default_seed()

    def params_for(nu: float, m: int) -> TheoryParams:
        return TheoryParams(
            cooccur_pos=args.rho, cooccur_neg=args.q, flip_prob=nu,
            n_pairs=m, pi11=pi11, pi10=pi10, pi01=pi01, pi00=pi00,
        )

    if args.bounds:
        rows = ["nu,bound_growth,bound_ratio"]
        for nu in nus:
            growth, ratio = min_prompts_for_advantage(params_for(nu, m_values[0]))
            rows.append(f"{nu!r},{growth!r},{ratio!r}")
    else:
        rows = ["nu,m,delta_closed,delta_mc,se"]
        for nu in nus:
            for m in m_values:
                params = params_for(nu, m)
                closed = win_rate_difference_closed_form(params)
                if args.mc_trials > 0:
                    est, se = win_rate_monte_carlo(params, args.mc_trials, seed, bonus=args.bonus)
                    mc_cells = f"{est!r},{se!r}"
                else:
                    mc_cells = ","
                rows.append(f"{nu!r},{m},{closed!r},{mc_cells}")
    text = "\n".join(rows) + "\n"
    if args.out is not None:
        write_text_atomic(args.out, text)
        print(f"theory table -> {args.out} ({len(rows) - 1} rows)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparc", description="Black-box multi-label score refinement toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="chatty logging on stderr")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    gen = commands.add_parser(
        "gen-prompts", help="generate compound prompt texts from co-occurrence statistics"
    )
    gen.add_argument("--vocab", type=_positive_path, required=True, help="text file, one class name per line")
    gen.add_argument("--cooc", type=_positive_path, required=True, help="NxN CSV of P(j present | i present)")
    gen.add_argument("--triplets", type=_positive_path, default=None, help="sparse CSV i,j,k,prob")
    gen.add_argument("--pair-threshold", type=float, default=0.1)
    gen.add_argument("--triplet-threshold", type=float, default=0.3)
    gen.add_argument("--pair-template", default="{A} and {B}")
    gen.add_argument("--triplet-template", default="{A}, {B}, and {C}")
    gen.add_argument("--start-id", type=int, default=None, help="first prompt id (default: 2 * n_classes)")
    gen.add_argument("--randomized-per-class", type=int, default=0, metavar="N",
                     help="append N random-suffix ablation prompts per class")
    gen.add_argument("--rand-len", type=int, default=10)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", type=Path, required=True)
    _add_common(gen)
    gen.set_defaults(func=cmd_gen_prompts)

    sim = commands.add_parser("simulate", help="build a synthetic labeled bundle from a config file")
    sim.add_argument("config", type=_positive_path, help="flat key=value generator config")
    sim.add_argument("--out", type=Path, required=True, help="bundle output directory")
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--force", action="store_true", help="overwrite an existing bundle directory")
    _add_common(sim)
    sim.set_defaults(func=cmd_simulate)

    fuse = commands.add_parser("fuse", help="debias a bundle and write refined class scores")
    fuse.add_argument("bundle", type=_positive_path, help="bundle directory")
    fuse.add_argument("--strategy", default="maxvariance",
                      help="maxvariance | kmax:<k> | meangeq:<K> | singleton")
    fuse.add_argument("--no-merge", action="store_true", help="emit fused scores without the singleton merge")
    fuse.add_argument("--out", type=Path, required=True, help="output directory")
    _add_common(fuse)
    fuse.set_defaults(func=cmd_fuse)

    ev = commands.add_parser("eval", help="average-precision report against bundle labels")
    ev.add_argument("bundle", type=_positive_path, help="bundle directory")
    ev.add_argument("--scores", type=_positive_path, default=None,
                    help="refined.csv from `sparc fuse` (default: run --strategy in-process)")
    ev.add_argument("--strategy", default="singleton")
    ev.add_argument("--out", type=Path, default=None, help="write CSV here instead of stdout")
    _add_common(ev)
    ev.set_defaults(func=cmd_eval)

    fit = commands.add_parser("fit-noise", help="fit score-composition families to compound scores")
    fit.add_argument("bundle", type=_positive_path, help="bundle directory (labels required)")
    fit.add_argument("--families", default="all", help="comma list, or 'all'")
    fit.add_argument("--raw", action="store_true", help="fit raw scores instead of debiased ones")
    fit.add_argument("--out", type=Path, default=None, help="write CSV here instead of stdout")
    _add_common(fit)
    fit.set_defaults(func=cmd_fit_noise)

    theory = commands.add_parser("theory", help="win-rate difference tables (closed form, MC, bounds)")
    theory.add_argument("--rho", "--cooccur-pos", dest="rho", type=float, required=True,
                        help="companion presence rate on positive images")
    theory.add_argument("--q", "--cooccur-neg", dest="q", type=float, required=True,
                        help="companion presence rate on negative images")
    theory.add_argument("--nu", default="0.0", help="flip probability, or comma list for a sweep")
    group = theory.add_mutually_exclusive_group()
    group.add_argument("--m", type=int, default=None, help="single compound-prompt count")
    group.add_argument("--sweep-m", default="2:60", help="inclusive LO:HI range of m")
    theory.add_argument("--pos-marginal", type=float, default=0.55,
                        help="observed-label marginal generating the pi cells (default 0.55)")
    theory.add_argument("--pi11", type=float, default=None)
    theory.add_argument("--pi10", type=float, default=None)
    theory.add_argument("--pi01", type=float, default=None)
    theory.add_argument("--pi00", type=float, default=None)
    theory.add_argument("--mc-trials", type=int, default=20_000,
                        help="Monte Carlo trials per row; 0 disables the MC columns")
    theory.add_argument("--bonus", type=float, default=0.5, help="overlap bonus used by the MC scorer")
    theory.add_argument("--seed", type=int, default=None)
    theory.add_argument("--bounds", action="store_true",
                        help="emit sufficient lower bounds on m instead of the sweep")
    theory.add_argument("--out", type=Path, default=None, help="write CSV here instead of stdout")
    _add_common(theory)
    theory.set_defaults(func=cmd_theory)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        sys.stderr.write("error: --threads must be >= 1\n")
        return EXIT_ERROR
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - contract: bugs exit 2
        sys.stderr.write(f"internal error: {exc!r}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
