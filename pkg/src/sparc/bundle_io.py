"""Bundle serialization: canonical JSON manifest plus raw binary blobs.

On-disk layout of a bundle directory::

    manifest.json    canonical JSON (sorted keys, 2-space indent, ASCII)
    singleton.f32    row-major IEEE-754 binary32, little-endian, no header
    auxiliary.f32    "
    compound.f32     "
    labels.u8        one byte per cell, row-major (present iff labels exist)

The manifest carries ``format_version`` (currently 1); readers reject any
greater version.  Scores are stored in 32-bit floats but surfaced to
callers as float64; quantization happens exactly once, at write time.
Writing the same bundle twice yields byte-identical files, and a
write -> read -> write round trip is byte-stable.

All writes are atomic: content goes to a temp file in the target
directory, then ``os.replace`` moves it into place.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

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

__all__ = [
    "FORMAT_VERSION",
    "BundleIOError",
    "BundleFormatError",
    "BundleValidationError",
    "BundleManifest",
    "parse_manifest",
    "write_bundle",
    "read_bundle",
    "import_csv",
    "read_prompts_csv",
    "write_prompts_csv",
    "write_text_atomic",
]

FORMAT_VERSION = 1

MANIFEST_NAME = "manifest.json"
_MATRIX_FILES = {"singleton": "singleton.f32", "auxiliary": "auxiliary.f32", "compound": "compound.f32"}
_LABEL_FILE = "labels.u8"


class BundleIOError(Exception):
    """Filesystem-level bundle problem (missing file, refusal to overwrite)."""


class BundleFormatError(BundleIOError):
    """The on-disk bytes do not parse as a bundle of a supported version."""


class BundleValidationError(BundleIOError):
    """Bundle content violates an invariant; carries the full violation list."""

    def __init__(self, violations: list[str]) -> None:
        super().__init__("; ".join(violations))
        self.violations = list(violations)


@dataclass(frozen=True)
class BundleManifest:
    """Parsed manifest: everything except the blob payloads."""

    format_version: int
    classes: tuple[str, ...]
    prompts: tuple[PromptSpec, ...]
    image_ids: tuple[str, ...]
    matrix_prompt_ids: dict[str, tuple[int, ...]]
    has_labels: bool
    provenance: dict[str, str]


def write_text_atomic(path: Path | str, text: str) -> None:
    """Write ``text`` to ``path`` via temp file + rename in one step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_bytes_atomic(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _manifest_obj(bundle: ScoreBundle) -> dict:
    prompts = sorted(bundle.prompts, key=lambda p: p.id)
    obj: dict = {
        "format_version": FORMAT_VERSION,
        "classes": list(bundle.vocabulary.names),
        "image_ids": list(bundle.singleton.image_ids),
        "prompts": [
            {"id": p.id, "kind": p.kind.value, "text": p.text, "classes": list(p.class_set)}
            for p in prompts
        ],
        "matrices": {
            name: {
                "file": _MATRIX_FILES[name],
                "rows": mat.n_images,
                "cols": mat.n_prompts,
                "prompt_ids": list(mat.prompt_ids),
            }
            for name, mat in (
                ("singleton", bundle.singleton),
                ("auxiliary", bundle.auxiliary),
                ("compound", bundle.compound),
            )
        },
        "provenance": {str(k): str(v) for k, v in sorted(bundle.provenance.items())},
    }
    if bundle.labels is not None:
        obj["labels"] = {
            "file": _LABEL_FILE,
            "rows": bundle.labels.n_images,
            "cols": bundle.labels.n_classes,
        }
    return obj


def _canonical_json(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=True) + "\n"


def write_bundle(bundle: ScoreBundle, directory: Path | str, force: bool = False) -> Path:
    """Serialize ``bundle`` into ``directory``; return the manifest path.

    Refuses to overwrite an existing bundle unless ``force`` is set.
    The bundle is validated first; any violation aborts the write.
    """
    violations = validate_bundle(bundle)
    if violations:
        raise BundleValidationError(violations)
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if manifest_path.exists() and not force:
        raise BundleIOError(f"refusing to overwrite existing bundle at {manifest_path} (use force)")
    directory.mkdir(parents=True, exist_ok=True)

    for name, mat in (
        ("singleton", bundle.singleton),
        ("auxiliary", bundle.auxiliary),
        ("compound", bundle.compound),
    ):
        payload = np.ascontiguousarray(mat.values, dtype="<f4").tobytes()
        _write_bytes_atomic(directory / _MATRIX_FILES[name], payload)
    if bundle.labels is not None:
        _write_bytes_atomic(directory / _LABEL_FILE, np.ascontiguousarray(bundle.labels.values, dtype=np.uint8).tobytes())
    write_text_atomic(manifest_path, _canonical_json(_manifest_obj(bundle)))
    return manifest_path


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise BundleFormatError(f"manifest: missing key {key!r} in {where}")
    return obj[key]


def parse_manifest(text: str) -> BundleManifest:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"manifest: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise BundleFormatError("manifest: top level must be a JSON object")
    version = _require(obj, "format_version", "top level")
    if not isinstance(version, int) or version < 1:
        raise BundleFormatError(f"manifest: bad format_version {version!r}")
    if version > FORMAT_VERSION:
        raise BundleFormatError(
            f"manifest: format_version {version} is newer than supported version {FORMAT_VERSION}"
        )
    classes = tuple(str(c) for c in _require(obj, "classes", "top level"))
    image_ids = tuple(str(i) for i in _require(obj, "image_ids", "top level"))
    prompts = []
    for row in _require(obj, "prompts", "top level"):
        try:
            prompts.append(
                PromptSpec(row["id"], row["text"], row["kind"], row["classes"])
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise BundleFormatError(f"manifest: malformed prompt entry {row!r} ({exc})") from exc
    matrices = _require(obj, "matrices", "top level")
    prompt_ids: dict[str, tuple[int, ...]] = {}
    for name in _MATRIX_FILES:
        entry = _require(matrices, name, "matrices")
        for key in ("file", "rows", "cols", "prompt_ids"):
            _require(entry, key, f"matrices.{name}")
        prompt_ids[name] = tuple(int(p) for p in entry["prompt_ids"])
        if len(prompt_ids[name]) != int(entry["cols"]):
            raise BundleFormatError(
                f"manifest: matrices.{name} declares {entry['cols']} cols but {len(prompt_ids[name])} prompt ids"
            )
    return BundleManifest(
        format_version=version,
        classes=classes,
        prompts=tuple(prompts),
        image_ids=image_ids,
        matrix_prompt_ids=prompt_ids,
        has_labels="labels" in obj,
        provenance={str(k): str(v) for k, v in obj.get("provenance", {}).items()},
    )


def _read_blob(path: Path, rows: int, cols: int, itemsize: int) -> bytes:
    if not path.exists():
        raise BundleFormatError(f"missing blob file {path.name}")
    payload = path.read_bytes()
    expected = rows * cols * itemsize
    if len(payload) != expected:
        raise BundleFormatError(
            f"blob {path.name}: {len(payload)} bytes on disk, manifest implies {expected}"
        )
    return payload


def read_bundle(directory: Path | str) -> ScoreBundle:
    """Load and validate the bundle stored in ``directory``."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise BundleIOError(f"no bundle manifest at {manifest_path}")
    text = manifest_path.read_text(encoding="utf-8")
    manifest = parse_manifest(text)
    raw = json.loads(text)

    mats: dict[str, ScoreMatrix] = {}
    for name, fname in _MATRIX_FILES.items():
        entry = raw["matrices"][name]
        rows, cols = int(entry["rows"]), int(entry["cols"])
        payload = _read_blob(directory / fname, rows, cols, 4)
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)
        mats[name] = ScoreMatrix(values, manifest.image_ids, manifest.matrix_prompt_ids[name])

    labels = None
    if manifest.has_labels:
        entry = raw["labels"]
        rows, cols = int(entry["rows"]), int(entry["cols"])
        payload = _read_blob(directory / _LABEL_FILE, rows, cols, 1)
        labels = LabelMatrix(np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols), manifest.image_ids)

    bundle = ScoreBundle(
        vocabulary=ClassVocabulary(manifest.classes),
        prompts=manifest.prompts,
        singleton=mats["singleton"],
        auxiliary=mats["auxiliary"],
        compound=mats["compound"],
        labels=labels,
        provenance=manifest.provenance,
    )
    violations = validate_bundle(bundle)
    if violations:
        raise BundleValidationError(violations)
    return bundle


def _parse_class_list(cell: str) -> tuple[int, ...]:
    cell = cell.strip()
    if not cell:
        return ()
    return tuple(int(tok) for tok in cell.replace(";", " ").replace(",", " ").split())


def read_prompts_csv(path: Path | str) -> list[PromptSpec]:
    """Prompt table CSV: columns ``id, kind, text, classes``.

    ``classes`` holds space- or semicolon-separated class indices.
    """
    path = Path(path)
    prompts: list[PromptSpec] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"id", "kind", "text", "classes"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise BundleFormatError(
                f"{path.name}: prompt CSV needs columns {sorted(needed)}, found {reader.fieldnames}"
            )
        for row in reader:
            try:
                prompts.append(
                    PromptSpec(int(row["id"]), row["text"], row["kind"], _parse_class_list(row["classes"]))
                )
            except (ValueError, TypeError) as exc:
                raise BundleFormatError(f"{path.name}: malformed prompt row {row!r} ({exc})") from exc
    return prompts


def write_prompts_csv(path: Path | str, prompts: Iterable[PromptSpec]) -> None:
    rows = ["id,kind,text,classes"]
    for p in prompts:
        text = p.text.replace('"', '""')
        classes = " ".join(str(c) for c in p.class_set)
        rows.append(f'{p.id},{p.kind.value},"{text}",{classes}')
    write_text_atomic(path, "\n".join(rows) + "\n")


def import_csv(
    scores_csv: Path | str,
    prompts_csv: Path | str,
    labels_csv: Path | str | None = None,
    provenance: dict[str, str] | None = None,
) -> ScoreBundle:
    """Assemble a bundle from CSV inputs.

    ``scores_csv`` is wide: first column ``image_id``, remaining column
    headers are prompt ids.  ``prompts_csv`` follows
    :func:`read_prompts_csv`.  The vocabulary is derived from the
    singleton prompts (class index order, names from prompt text is not
    assumed: names come from a ``class:<idx>:<name>`` convention in the
    labels header when present, else ``class_<idx>``).
    ``labels_csv`` is wide as well: ``image_id`` then one 0/1 column per
    class, in class order.
    """
    prompts = read_prompts_csv(prompts_csv)
    by_kind: dict[PromptKind, list[PromptSpec]] = {k: [] for k in PromptKind}
    for p in prompts:
        by_kind[p.kind].append(p)
    singles = sorted(by_kind[PromptKind.SINGLETON], key=lambda p: p.class_set)
    n_classes = len(singles)

    path = Path(scores_csv)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "image_id":
            raise BundleFormatError(f"{path.name}: first score column must be image_id")
        col_ids = [int(h) for h in header[1:]]
        image_ids: list[str] = []
        rows: list[list[float]] = []
        for row in reader:
            if not row:
                continue
            image_ids.append(row[0])
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError as exc:
                raise BundleFormatError(f"{path.name}: non-numeric score in row for {row[0]!r}") from exc
    table = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(col_ids)))
    if table.size and table.shape[1] != len(col_ids):
        raise BundleFormatError(f"{path.name}: ragged rows")
    col_of = {pid: k for k, pid in enumerate(col_ids)}

    def matrix_for(kind: PromptKind, ordered: list[PromptSpec]) -> ScoreMatrix:
        ids = [p.id for p in ordered]
        missing = [pid for pid in ids if pid not in col_of]
        if missing:
            raise BundleFormatError(f"{path.name}: no score column for prompt ids {missing}")
        cols = [col_of[pid] for pid in ids]
        return ScoreMatrix(table[:, cols], image_ids, ids)

    names: list[str] = [f"class_{i}" for i in range(n_classes)]
    labels = None
    if labels_csv is not None:
        lpath = Path(labels_csv)
        with lpath.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "image_id":
                raise BundleFormatError(f"{lpath.name}: first label column must be image_id")
            if len(header) - 1 != n_classes:
                raise BundleFormatError(
                    f"{lpath.name}: {len(header) - 1} label columns for {n_classes} singleton prompts"
                )
            names = [str(h) for h in header[1:]]
            lab_ids: list[str] = []
            lab_rows: list[list[int]] = []
            for row in reader:
                if not row:
                    continue
                lab_ids.append(row[0])
                lab_rows.append([int(x) for x in row[1:]])
        labels = LabelMatrix(np.asarray(lab_rows, dtype=np.uint8).reshape(len(lab_ids), n_classes), lab_ids)

    bundle = ScoreBundle(
        vocabulary=ClassVocabulary(names),
        prompts=prompts,
        singleton=matrix_for(PromptKind.SINGLETON, singles),
        auxiliary=matrix_for(
            PromptKind.AUXILIARY, sorted(by_kind[PromptKind.AUXILIARY], key=lambda p: p.class_set)
        ),
        compound=matrix_for(PromptKind.COMPOUND, sorted(by_kind[PromptKind.COMPOUND], key=lambda p: p.id)),
        labels=labels,
        provenance=provenance or {},
    )
    violations = validate_bundle(bundle)
    if violations:
        raise BundleValidationError(violations)
    return bundle
