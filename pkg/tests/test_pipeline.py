from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from eegworkload.cli import main
from eegworkload.config import RunConfig, parse_config
from eegworkload.pipeline import StageDependencyError, features, preprocess
from eegworkload.report import render
from eegworkload.spectral import FEATURE_COLUMNS, TASKS

SMALL = {
    "synth": {"participants": 2, "blocks_per_task": 5, "epochs_per_condition": 8,
              "saturated_participants": ["P02"]},
    "cv": {"iterations": 3},
    "forest": {"n_trees": 20},
    "staircase": {"sessions": 4},
}


def digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    out = root / "out"
    for cmd in ("synth", "preprocess", "features", "cv", "staircase", "report"):
        assert run(cmd, "--config", cfg, "--seed", 4, "--out", out) == 0, cmd
    return out


@pytest.fixture(scope="module")
def cfg():
    return parse_config(SMALL)


class TestPreprocess:
    def test_inclusion_on_clean_participant(self, workspace):
        inc = pd.read_csv(workspace / "preprocess" / "inclusion.csv", dtype={"participant": str})
        clean = inc.set_index("participant").loc["P01"]
        assert clean["status"] == "ok"
        assert clean["n_kept"] / clean["n_epochs"] >= 0.98

    def test_saturated_participant_excluded(self, workspace):
        inc = pd.read_csv(workspace / "preprocess" / "inclusion.csv", dtype={"participant": str})
        sat = inc.set_index("participant").loc["P02"]
        assert sat["excluded_fraction"] >= 0.6
        assert sat["decision"] == "exclude"
        feats = pd.read_csv(workspace / "features" / "features.csv", dtype={"participant": str})
        assert "P02" not in set(feats["participant"])

    def test_rerun_is_bitwise_identical(self, workspace, cfg, tmp_path):
        preprocess(workspace / "synth" / "manifest.json", tmp_path / "pre", cfg)
        mine = digest(tmp_path / "pre")
        theirs = digest(workspace / "preprocess")
        theirs.pop("config.json")
        # run.json embeds the resolved config, which carries the CLI seed
        mine.pop("run.json")
        theirs.pop("run.json")
        assert mine == theirs

    def test_artifacts_written(self, workspace):
        pre = workspace / "preprocess"
        assert (pre / "calibration" / "P01.thresholds.json").exists()
        assert (pre / "calibration" / "P01.asr.json").exists()
        assert len(list((pre / "cleaned").glob("P01_*.csv"))) == len(TASKS)
        assert len(list((pre / "masks").glob("P01_*.jsonl"))) == len(TASKS)

    def test_missing_participant_recorded(self, workspace, cfg, tmp_path):
        manifest = json.loads((workspace / "synth" / "manifest.json").read_text())
        base = workspace / "synth"
        entries = manifest["participants"] if isinstance(manifest, dict) else manifest
        entries[0]["rest"] = str(base / "does_not_exist.csv")
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        # relative paths in the manifest resolve against the synth directory
        for p in base.iterdir():
            if p.is_dir():
                shutil.copytree(p, tmp_path / p.name)
        table = preprocess(tmp_path / "manifest.json", tmp_path / "pre", cfg)
        first = table.iloc[0]
        assert first["status"] in ("missing", "data_error")
        assert first["decision"] == "exclude"


class TestFeatures:
    def test_rows_bounded_by_kept_epochs(self, workspace):
        inc = pd.read_csv(workspace / "preprocess" / "inclusion.csv", dtype={"participant": str})
        feats = pd.read_csv(workspace / "features" / "features.csv", dtype={"participant": str})
        kept = inc.set_index("participant").loc["P01", "n_kept"]
        assert len(feats) <= inc.set_index("participant").loc["P01", "n_epochs"]
        assert len(feats) == kept

    def test_column_order_and_finite(self, workspace):
        feats = pd.read_csv(workspace / "features" / "features.csv")
        assert tuple(feats.columns) == FEATURE_COLUMNS
        assert np.isfinite(feats[list(FEATURE_COLUMNS[5:])].to_numpy()).all()

    def test_planted_effect_survives_signal_path(self, workspace):
        summary = json.loads((workspace / "cv" / "within_nback" / "summary.json").read_text())
        assert summary["mean_macro_f1"] >= 0.8

    def test_missing_preprocess_is_dependency_error(self, cfg, tmp_path):
        with pytest.raises(StageDependencyError):
            features(tmp_path / "nowhere", tmp_path / "feat", cfg)

    def test_stats_and_behavioral_tables(self, workspace):
        stats = pd.read_csv(workspace / "features" / "stats_table.csv")
        assert len(stats) > 0
        assert (workspace / "features" / "behavioral.csv").exists()


class TestCli:
    def test_exit_codes(self, workspace, tmp_path):
        assert run("features", "--out", tmp_path / "empty") == 4
        assert run("cv", "--seed", 1, "--out", tmp_path / "empty") == 4
        assert run("cv", "--out", workspace) == 2  # no seed
        assert run("cv", "--seed", 1, "--mode", "sideways", "--out", workspace) == 2
        assert run("cv", "--seed", 1, "--iterations", 0, "--out", workspace) == 2
        bad = tmp_path / "bad.json"
        bad.write_text('{"cv": {"iterations": 2,}}')
        assert run("cv", "--config", bad, "--seed", 1, "--out", workspace) == 2
        broken = tmp_path / "features.csv"
        broken.write_text("participant,task\nP01,nback\n")
        assert run("cv", "--seed", 1, "--features", broken, "--out", tmp_path / "o") == 3

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_stage_writes_only_its_directory(self, workspace, tmp_path):
        out = tmp_path / "iso"
        shutil.copytree(workspace, out)
        before = digest(out)
        assert run("cv", "--config", Path(workspace).parent / "config.json", "--seed", 4,
                   "--mode", "within:stroop", "--out", out) == 0
        after = digest(out)
        changed = {k for k in set(before) | set(after) if before.get(k) != after.get(k)}
        assert changed and all(k.startswith("cv/") for k in changed)

    def test_config_recorded(self, workspace):
        for cmd in ("synth", "cv", "report"):
            doc = json.loads((workspace / cmd / "config.json").read_text())
            assert doc["seed"] == 4
            assert parse_config(doc) == parse_config({**SMALL, "seed": 4, "out": str(workspace)})

    def test_staircase_outputs(self, workspace):
        conv = pd.read_csv(workspace / "staircase" / "convergence.csv")
        assert (conv["invariant_violations"] == 0).all()
        traj = pd.read_csv(workspace / "staircase" / "trajectories.csv")
        assert traj["session"].nunique() == 4


class TestReport:
    def test_one_table_per_task(self, workspace):
        rep = workspace / "report"
        for task in TASKS:
            assert (rep / f"metrics_within_{task}.csv").exists()
            assert (rep / f"metrics_within_{task}.txt").exists()

    def test_macro_row_transcribed_exactly(self, workspace):
        for task in TASKS:
            src = pd.read_csv(workspace / "cv" / f"within_{task}" / "metrics.csv",
                              float_precision="round_trip")
            rep = pd.read_csv(workspace / "report" / f"metrics_within_{task}.csv",
                              float_precision="round_trip")
            pd.testing.assert_frame_equal(src, rep, check_exact=True)
            text = (workspace / "report" / f"metrics_within_{task}.txt").read_text()
            assert f"{src.iloc[-1]['f1']:.3f}" in text.splitlines()[-1]

    def test_figures_deterministic(self, workspace, tmp_path):
        render(workspace, tmp_path / "a")
        render(workspace, tmp_path / "b")
        a, b = digest(tmp_path / "a"), digest(tmp_path / "b")
        assert a == b
        assert {"band_power_by_task.svg", "staircase_trajectories.svg"} <= set(a)
        original = digest(workspace / "report")
        original.pop("config.json")
        assert original == a

    def test_nothing_to_report(self, tmp_path):
        assert run("report", "--out", tmp_path) == 4


def test_default_config_round_trips():
    cfg = RunConfig(seed=3)
    assert parse_config(cfg.to_dict()) == cfg
