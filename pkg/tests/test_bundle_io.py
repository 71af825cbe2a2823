"""Round trips, canonical bytes, and failure modes of bundle storage."""

from __future__ import annotations

import json

import numpy as np
import pytest

from sparc.bundle_io import (
    BundleFormatError,
    BundleIOError,
    BundleValidationError,
    import_csv,
    read_bundle,
    read_prompts_csv,
    write_bundle,
    write_prompts_csv,
)
from sparc.core import PromptKind, PromptSpec, ScoreBundle, ScoreMatrix, bundles_equal
from support import random_bundle


def test_blob_byte_count(tmp_path):
    """A 2x3 float32 matrix must serialize to exactly 24 bytes."""
    gen = np.random.default_rng(0)
    b = random_bundle(gen, n_images=2, n_classes=3, pair_list=[(0, 1), (0, 2), (1, 2)])
    write_bundle(b, tmp_path / "b")
    payload = (tmp_path / "b" / "compound.f32").read_bytes()
    assert len(payload) == 2 * 3 * 4


def test_round_trip_preserves_everything(tmp_path):
    gen = np.random.default_rng(1)
    b = random_bundle(gen)
    write_bundle(b, tmp_path / "b")
    back = read_bundle(tmp_path / "b")
    assert bundles_equal(b, back)


def test_write_read_write_byte_identical(tmp_path):
    gen = np.random.default_rng(2)
    b = random_bundle(gen)
    write_bundle(b, tmp_path / "first")
    back = read_bundle(tmp_path / "first")
    write_bundle(back, tmp_path / "second")
    for name in ("manifest.json", "singleton.f32", "auxiliary.f32", "compound.f32", "labels.u8"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes(), name


def test_overwrite_refused_without_force(tmp_path):
    gen = np.random.default_rng(3)
    b = random_bundle(gen)
    write_bundle(b, tmp_path / "b")
    with pytest.raises(BundleIOError):
        write_bundle(b, tmp_path / "b")
    write_bundle(b, tmp_path / "b", force=True)  # explicit force succeeds


def test_invalid_bundle_refused_at_write(tmp_path):
    gen = np.random.default_rng(4)
    b = random_bundle(gen)
    values = b.singleton.values.copy()
    values[0, 0] = np.inf
    bad = ScoreBundle(
        b.vocabulary,
        b.prompts,
        ScoreMatrix(values, b.singleton.image_ids, b.singleton.prompt_ids),
        b.auxiliary,
        b.compound,
        b.labels,
        b.provenance,
    )
    with pytest.raises(BundleValidationError) as err:
        write_bundle(bad, tmp_path / "b")
    assert any("non-finite" in v for v in err.value.violations)
    assert not (tmp_path / "b" / "manifest.json").exists()


def test_newer_format_version_rejected(tmp_path):
    gen = np.random.default_rng(5)
    write_bundle(random_bundle(gen), tmp_path / "b")
    manifest = tmp_path / "b" / "manifest.json"
    obj = json.loads(manifest.read_text())
    obj["format_version"] = 2
    manifest.write_text(json.dumps(obj))
    with pytest.raises(BundleFormatError, match="newer than supported"):
        read_bundle(tmp_path / "b")


def test_truncated_blob_rejected(tmp_path):
    gen = np.random.default_rng(6)
    write_bundle(random_bundle(gen), tmp_path / "b")
    blob = tmp_path / "b" / "singleton.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(BundleFormatError, match="bytes on disk"):
        read_bundle(tmp_path / "b")


def test_missing_blob_rejected(tmp_path):
    gen = np.random.default_rng(7)
    write_bundle(random_bundle(gen), tmp_path / "b")
    (tmp_path / "b" / "auxiliary.f32").unlink()
    with pytest.raises(BundleFormatError, match="missing blob"):
        read_bundle(tmp_path / "b")


def test_malformed_json_rejected(tmp_path):
    gen = np.random.default_rng(8)
    write_bundle(random_bundle(gen), tmp_path / "b")
    (tmp_path / "b" / "manifest.json").write_text("{not json")
    with pytest.raises(BundleFormatError, match="not valid JSON"):
        read_bundle(tmp_path / "b")


def test_corrupt_class_reference_rejected(tmp_path):
    gen = np.random.default_rng(9)
    write_bundle(random_bundle(gen), tmp_path / "b")
    manifest = tmp_path / "b" / "manifest.json"
    obj = json.loads(manifest.read_text())
    obj["prompts"][0]["classes"] = [12]
    manifest.write_text(json.dumps(obj))
    with pytest.raises(BundleValidationError):
        read_bundle(tmp_path / "b")


def test_scores_stored_as_float32(tmp_path):
    """Write quantizes float64 to float32 exactly once."""
    gen = np.random.default_rng(10)
    b = random_bundle(gen, n_images=3, n_classes=2, pair_list=[(0, 1)])
    third = np.float64(1.0) / 3.0
    values = b.singleton.values.copy()
    values[0, 0] = third
    b2 = ScoreBundle(
        b.vocabulary,
        b.prompts,
        ScoreMatrix(values, b.singleton.image_ids, b.singleton.prompt_ids),
        b.auxiliary,
        b.compound,
        b.labels,
        b.provenance,
    )
    write_bundle(b2, tmp_path / "b")
    back = read_bundle(tmp_path / "b")
    assert back.singleton.values[0, 0] == np.float64(np.float32(third))
    assert back.singleton.values[0, 0] != third


def test_missing_directory_errors(tmp_path):
    with pytest.raises(BundleIOError, match="no bundle manifest"):
        read_bundle(tmp_path / "nothing_here")


class TestPromptsCSV:
    def test_round_trip(self, tmp_path):
        prompts = [
            PromptSpec(0, "a photo of a cat", "singleton", (0,)),
            PromptSpec(1, 'say "hi", twice', "compound", (0, 1)),
        ]
        write_prompts_csv(tmp_path / "p.csv", prompts)
        back = read_prompts_csv(tmp_path / "p.csv")
        assert back == prompts

    def test_missing_columns_rejected(self, tmp_path):
        (tmp_path / "p.csv").write_text("id,text\n0,hello\n")
        with pytest.raises(BundleFormatError, match="needs columns"):
            read_prompts_csv(tmp_path / "p.csv")


class TestImportCSV:
    def _write_inputs(self, tmp_path, gen):
        b = random_bundle(gen, n_images=4, n_classes=3, pair_list=[(0, 1), (1, 2)])
        write_prompts_csv(tmp_path / "prompts.csv", b.prompts)
        all_ids = list(b.singleton.prompt_ids) + list(b.auxiliary.prompt_ids) + list(b.compound.prompt_ids)
        table = np.column_stack([b.singleton.values, b.auxiliary.values, b.compound.values])
        lines = ["image_id," + ",".join(str(i) for i in all_ids)]
        for r, img in enumerate(b.singleton.image_ids):
            lines.append(img + "," + ",".join(repr(float(x)) for x in table[r]))
        (tmp_path / "scores.csv").write_text("\n".join(lines) + "\n")
        lab_lines = ["image_id," + ",".join(b.vocabulary.names)]
        for r, img in enumerate(b.singleton.image_ids):
            lab_lines.append(img + "," + ",".join(str(int(x)) for x in b.labels.values[r]))
        (tmp_path / "labels.csv").write_text("\n".join(lab_lines) + "\n")
        return b

    def test_import_matches_source(self, tmp_path):
        gen = np.random.default_rng(11)
        b = self._write_inputs(tmp_path, gen)
        got = import_csv(tmp_path / "scores.csv", tmp_path / "prompts.csv", tmp_path / "labels.csv")
        np.testing.assert_array_equal(got.singleton.values, b.singleton.values)
        np.testing.assert_array_equal(got.compound.values, b.compound.values)
        np.testing.assert_array_equal(got.labels.values, b.labels.values)
        assert got.vocabulary.names == b.vocabulary.names
        assert got.singleton.image_ids == b.singleton.image_ids

    def test_missing_score_column_rejected(self, tmp_path):
        gen = np.random.default_rng(12)
        self._write_inputs(tmp_path, gen)
        text = (tmp_path / "scores.csv").read_text().splitlines()
        header = text[0].split(",")
        trimmed = [",".join(row.split(",")[:-1]) for row in text]
        (tmp_path / "scores.csv").write_text("\n".join(trimmed) + "\n")
        with pytest.raises(BundleFormatError, match="no score column"):
            import_csv(tmp_path / "scores.csv", tmp_path / "prompts.csv")
