"""Subprocess-level checks: exit codes, determinism, CSV contracts."""

from __future__ import annotations

import csv
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

CONFIG_TEXT = """\
n_classes = 4
n_images = 80
target_prior = 0.5
cooccur_pos = 0.6
cooccur_neg = 0.05
flip_prob = 0.1
family = or_static_bonus
bonus = 0.5
noise_sd = 0.5
seed = 17
"""


def run_cli(*args, env_extra=None, cwd=None):
    env = dict(os.environ)
    env.pop("SPARC_SEED", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "sparc", *map(str, args)],
        capture_output=True,
        text=True,
        env=env,
        cwd=cwd,
    )


def tree_bytes(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "gen.cfg"
    config.write_text(CONFIG_TEXT, encoding="utf-8")
    bundle = root / "bundle"
    result = run_cli("simulate", config, "--out", bundle)
    assert result.returncode == 0, result.stderr
    return root


def bundle_dir(workspace: Path) -> Path:
    return workspace / "bundle"


class TestTopLevel:
    def test_version_and_help_exit_zero(self):
        assert run_cli("--version").returncode == 0
        for command in ("gen-prompts", "simulate", "fuse", "eval", "fit-noise", "theory"):
            result = run_cli(command, "--help")
            assert result.returncode == 0
            assert command in result.stdout

    def test_unknown_command_is_usage_error(self):
        result = run_cli("transmogrify")
        assert result.returncode == 1
        assert "error:" in result.stderr

    def test_unknown_flag_is_usage_error(self):
        result = run_cli("theory", "--rho", "0.5", "--q", "0.1", "--frobnicate")
        assert result.returncode == 1

    def test_missing_subcommand_is_usage_error(self):
        assert run_cli().returncode == 1


class TestSimulate:
    def test_reruns_are_byte_identical(self, workspace):
        out = workspace / "bundle_again"
        result = run_cli("simulate", workspace / "gen.cfg", "--out", out)
        assert result.returncode == 0, result.stderr
        assert tree_bytes(out) == tree_bytes(bundle_dir(workspace))

    def test_seed_flag_changes_scores(self, workspace, tmp_path):
        out = tmp_path / "other"
        result = run_cli("simulate", workspace / "gen.cfg", "--out", out, "--seed", "99")
        assert result.returncode == 0, result.stderr
        assert tree_bytes(out) != tree_bytes(bundle_dir(workspace))

    def test_env_seed_fills_in_when_config_has_none(self, tmp_path):
        config = tmp_path / "noseed.cfg"
        config.write_text(CONFIG_TEXT.replace("seed = 17\n", ""), encoding="utf-8")
        via_env = tmp_path / "via_env"
        via_flag = tmp_path / "via_flag"
        assert run_cli("simulate", config, "--out", via_env,
                       env_extra={"SPARC_SEED": "5"}).returncode == 0
        assert run_cli("simulate", config, "--out", via_flag, "--seed", "5").returncode == 0
        assert tree_bytes(via_env) == tree_bytes(via_flag)

    def test_config_seed_beats_env(self, workspace, tmp_path):
        out = tmp_path / "env_ignored"
        result = run_cli("simulate", workspace / "gen.cfg", "--out", out,
                         env_extra={"SPARC_SEED": "5"})
        assert result.returncode == 0
        assert tree_bytes(out) == tree_bytes(bundle_dir(workspace))

    def test_missing_config_is_error(self, tmp_path):
        result = run_cli("simulate", tmp_path / "absent.cfg", "--out", tmp_path / "x")
        assert result.returncode == 1
        assert "error:" in result.stderr

    def test_malformed_config_is_error(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("n_classes = 4\nmystery = 1\n", encoding="utf-8")
        result = run_cli("simulate", config, "--out", tmp_path / "x")
        assert result.returncode == 1
        assert "unknown config key" in result.stderr


class TestFuse:
    def test_writes_scores_and_stats(self, workspace, tmp_path):
        out = tmp_path / "fused"
        result = run_cli("fuse", bundle_dir(workspace), "--strategy", "maxvariance", "--out", out)
        assert result.returncode == 0, result.stderr
        with (out / "refined.csv").open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["image_id", "class_00", "class_01", "class_02", "class_03"]
        assert len(rows) == 81
        stats_header = (out / "debias_stats.csv").read_text().splitlines()[0]
        assert stats_header == "stage,matrix,index,mean,sd"

    def test_rerun_is_idempotent(self, workspace, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            assert run_cli("fuse", bundle_dir(workspace), "--out", out).returncode == 0
        assert tree_bytes(out_a) == tree_bytes(out_b)

    def test_bad_strategy_is_error(self, workspace, tmp_path):
        result = run_cli("fuse", bundle_dir(workspace), "--strategy", "bogus", "--out", tmp_path / "x")
        assert result.returncode == 1
        assert "unknown strategy" in result.stderr

    def test_missing_bundle_is_error(self, tmp_path):
        result = run_cli("fuse", tmp_path / "nope", "--out", tmp_path / "x")
        assert result.returncode == 1


class TestEval:
    def test_stdout_report_shape(self, workspace):
        result = run_cli("eval", bundle_dir(workspace))
        assert result.returncode == 0, result.stderr
        lines = result.stdout.strip().splitlines()
        assert lines[0] == "row_type,class_index,class_name,average_precision"
        assert lines[1].startswith("class,0,class_00,")
        assert lines[-1].startswith("mean,,,")
        mean_ap = float(lines[-1].rsplit(",", 1)[1])
        assert 0.0 < mean_ap <= 1.0

    def test_singleton_fuse_file_equals_direct_singleton_eval(self, workspace, tmp_path):
        """Pass-through strategy: evaluating fuse's singleton output file
        must say exactly what evaluating the debiased singleton says."""
        fused = tmp_path / "fused"
        assert run_cli("fuse", bundle_dir(workspace), "--strategy", "singleton",
                       "--out", fused).returncode == 0
        from_file = run_cli("eval", bundle_dir(workspace), "--scores", fused / "refined.csv",
                            "--out", tmp_path / "from_file.csv")
        direct = run_cli("eval", bundle_dir(workspace), "--strategy", "singleton",
                         "--out", tmp_path / "direct.csv")
        assert from_file.returncode == 0 and direct.returncode == 0
        assert (tmp_path / "from_file.csv").read_bytes() == (tmp_path / "direct.csv").read_bytes()

    def test_mismatched_scores_file_is_error(self, workspace, tmp_path):
        scores = tmp_path / "wrong.csv"
        scores.write_text("image_id,classX\nimg_000000,1.0\n", encoding="utf-8")
        result = run_cli("eval", bundle_dir(workspace), "--scores", scores)
        assert result.returncode == 1
        assert "vocabulary" in result.stderr


class TestFitNoise:
    def test_full_report(self, workspace, tmp_path):
        out = tmp_path / "fit.csv"
        result = run_cli("fit-noise", bundle_dir(workspace), "--raw", "--out", out)
        assert result.returncode == 0, result.stderr
        with out.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        families = [row["family"] for row in rows]
        assert families == ["constant", "only_and", "only_or", "additive",
                            "or_static_bonus", "or_variable_bonus", "lut"]
        fvu = {row["family"]: float(row["fvu"]) for row in rows}
        assert fvu["constant"] == 1.0
        assert fvu["lut"] <= fvu["or_variable_bonus"] <= fvu["or_static_bonus"] + 1e-9
        assert rows[4]["bonus_static"] != ""
        assert rows[0]["bonus_static"] == ""

    def test_family_subset_and_validation(self, workspace, tmp_path):
        result = run_cli("fit-noise", bundle_dir(workspace), "--families", "constant,only_or")
        assert result.returncode == 0
        assert result.stdout.splitlines()[1].startswith("constant,")
        bad = run_cli("fit-noise", bundle_dir(workspace), "--families", "parametric_cubist")
        assert bad.returncode == 1
        assert "unknown families" in bad.stderr


class TestTheory:
    def test_sweep_table_matches_library(self, workspace):
        result = run_cli("theory", "--rho", "0.15", "--q", "0.01", "--nu", "0.05",
                         "--sweep-m", "2:6", "--mc-trials", "0")
        assert result.returncode == 0, result.stderr
        lines = result.stdout.strip().splitlines()
        assert lines[0] == "nu,m,delta_closed,delta_mc,se"
        assert len(lines) == 6
        from sparc.theory import TheoryParams, win_rate_difference_closed_form

        p = 0.55
        params = TheoryParams(0.15, 0.01, 0.05, 4, p * (1 - p), p * p, (1 - p) ** 2, p * (1 - p))
        row = lines[3].split(",")
        assert row[:2] == ["0.05", "4"]
        assert float(row[2]) == win_rate_difference_closed_form(params)
        assert row[3] == row[4] == ""

    def test_monte_carlo_cells_are_seed_deterministic(self):
        args = ("theory", "--rho", "0.6", "--q", "0.05", "--nu", "0.1",
                "--m", "5", "--mc-trials", "2000", "--seed", "3")
        assert run_cli(*args).stdout == run_cli(*args).stdout

    def test_env_seed_reaches_monte_carlo(self):
        args = ("theory", "--rho", "0.6", "--q", "0.05", "--m", "5", "--mc-trials", "2000")
        via_env = run_cli(*args, env_extra={"SPARC_SEED": "3"})
        via_flag = run_cli(*args, "--seed", "3")
        assert via_env.stdout == via_flag.stdout
        assert via_env.stdout != run_cli(*args, "--seed", "4").stdout

    def test_bounds_table(self):
        result = run_cli("theory", "--rho", "0.15", "--q", "0.01", "--nu", "0.05,0.2", "--bounds")
        assert result.returncode == 0, result.stderr
        lines = result.stdout.strip().splitlines()
        assert lines[0] == "nu,bound_growth,bound_ratio"
        assert len(lines) == 3
        for line in lines[1:]:
            _, growth, ratio = line.split(",")
            assert float(growth) > 1 and float(ratio) > 1

    @pytest.mark.parametrize("extra", [
        ("--sweep-m", "9:2"),
        ("--sweep-m", "banana"),
        ("--pi11", "0.5"),
        ("--pos-marginal", "1.5"),
        ("--nu", "0.7"),
    ])
    def test_bad_parameters_exit_one(self, extra):
        result = run_cli("theory", "--rho", "0.15", "--q", "0.01", *extra)
        assert result.returncode == 1
        assert "error:" in result.stderr


class TestGenPrompts:
    @pytest.fixture()
    def inputs(self, tmp_path):
        vocab = tmp_path / "vocab.txt"
        vocab.write_text("cat\ndog\nsofa\n", encoding="utf-8")
        cooc = tmp_path / "cooc.csv"
        cooc.write_text("1.0,0.5,0.02\n0.6,1.0,0.01\n0.1,0.05,1.0\n", encoding="utf-8")
        triplets = tmp_path / "triplets.csv"
        triplets.write_text("i,j,k,prob\n0,1,2,0.4\n", encoding="utf-8")
        return tmp_path

    def test_worked_example(self, inputs):
        out = inputs / "prompts.csv"
        result = run_cli("gen-prompts", "--vocab", inputs / "vocab.txt",
                         "--cooc", inputs / "cooc.csv", "--triplets", inputs / "triplets.csv",
                         "--out", out)
        assert result.returncode == 0, result.stderr
        with out.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["text"] for r in rows] == ["cat and dog", "cat, dog, and sofa"]
        assert [r["id"] for r in rows] == ["6", "7"]
        assert all(r["kind"] == "compound" for r in rows)

    def test_randomized_prompts_append_deterministically(self, inputs):
        out_a, out_b = inputs / "a.csv", inputs / "b.csv"
        for out in (out_a, out_b):
            result = run_cli("gen-prompts", "--vocab", inputs / "vocab.txt",
                             "--cooc", inputs / "cooc.csv", "--randomized-per-class", "2",
                             "--seed", "4", "--out", out)
            assert result.returncode == 0, result.stderr
        assert out_a.read_bytes() == out_b.read_bytes()
        with out_a.open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 1 + 6  # header, one pair, 3 classes x 2 randomized

    def test_wrong_table_size_is_error(self, inputs, tmp_path):
        small = tmp_path / "small.csv"
        small.write_text("1.0,0.5\n0.6,1.0\n", encoding="utf-8")
        result = run_cli("gen-prompts", "--vocab", inputs / "vocab.txt",
                         "--cooc", small, "--out", tmp_path / "x.csv")
        assert result.returncode == 1
        assert "3x3" in result.stderr
