from __future__ import annotations

import json
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from eegworkload.dataset import (DataError, LabelingError, ManifestError, TrialEvent, assign_workload,
                                 behavioral_table, binary_class, chess_quartile_labels,
                                 condition_intervals, export_stats_table, label_events, load_manifest,
                                 read_events_jsonl, read_stats_table, write_events_jsonl,
                                 write_stats_table)
from eegworkload.spectral import DEFAULT_BANDS, TASKS


def ev(task, difficulty, trial=0, block=1, onset=0.0, offset=1.0, participant="P01", correct=True, rt=0.8):
    return TrialEvent(participant, task, block, trial, onset, offset, difficulty, correct, rt)


class TestChessQuartiles:
    def test_four_uniques(self):
        assert chess_quartile_labels([800, 900, 1000, 1100]) == {800.0: 0, 900.0: 1, 1000.0: 2, 1100.0: 3}

    def test_eight_uniques(self):
        ratings = [700, 800, 900, 1000, 1200, 1300, 1400, 1500]
        labels = chess_quartile_labels(ratings * 3)
        assert [labels[r] for r in ratings] == [0, 0, 1, 1, 2, 2, 3, 3]

    def test_duplicates_share_label(self):
        labels = chess_quartile_labels([900, 900, 1000, 1100, 1200, 900])
        assert len(labels) == 4
        assert labels[900.0] == 0

    def test_too_few(self):
        with pytest.raises(LabelingError):
            chess_quartile_labels([800, 900, 900, 1000])

    @given(k=st.integers(1, 30), seed=st.integers(0, 1000))
    def test_quartile_balance(self, k, seed):
        rng = np.random.default_rng(seed)
        ratings = rng.choice(np.arange(600, 2251), size=4 * k, replace=False)
        counts = np.bincount(list(chess_quartile_labels(ratings).values()), minlength=4)
        assert counts.tolist() == [k] * 4

    @given(st.lists(st.integers(600, 2250), min_size=4, max_size=80, unique=True))
    def test_sort_and_split_oracle(self, ratings):
        labels = chess_quartile_labels(ratings)
        u = sorted(ratings)
        n = len(u)
        for i, r in enumerate(u):
            # rank i+1 belongs to the first quartile whose nearest-rank boundary it does not exceed
            want = sum((i + 1) > math.ceil(p * n) for p in (0.25, 0.5, 0.75))
            assert labels[float(r)] == want
        levels = [labels[float(r)] for r in u]
        assert levels == sorted(levels)


class TestAssignWorkload:
    def test_rotation_150(self):
        lab = assign_workload(ev("rotation", 150))
        assert (lab.level, lab.binary) == (3, "high")

    @pytest.mark.parametrize("deg,level", [(0, 0), (50, 1), (100, 2), (150, 3)])
    def test_rotation_levels(self, deg, level):
        assert assign_workload(ev("rotation", deg)).level == level

    def test_nback_1_low(self):
        lab = assign_workload(ev("nback", 1))
        assert (lab.level, lab.binary) == (1, "low")

    def test_stroop(self):
        assert assign_workload(ev("stroop", 1)) .binary == "high"
        assert assign_workload(ev("stroop", "incongruent")).level == 1
        assert assign_workload(ev("stroop", "congruent")).binary == "low"

    def test_chess_uses_map(self):
        lab = assign_workload(ev("chess", 1000), {800.0: 0, 1000.0: 2})
        assert (lab.level, lab.binary) == (2, "high")
        with pytest.raises(LabelingError):
            assign_workload(ev("chess", 1000))
        with pytest.raises(LabelingError):
            assign_workload(ev("chess", 1234), {800.0: 0})

    @pytest.mark.parametrize("task,diff", [("nback", 4), ("nback", 1.5), ("rotation", 75), ("stroop", 2),
                                           ("stroop", "neutral")])
    def test_unknown_difficulty(self, task, diff):
        with pytest.raises(LabelingError):
            assign_workload(ev(task, diff))

    @given(level=st.integers(0, 3), task=st.sampled_from(["nback", "rotation", "chess"]))
    def test_binary_is_function_of_level(self, level, task):
        assert binary_class(task, level) == ("low" if level in (0, 1) else "high")

    def test_event_validation(self):
        with pytest.raises(DataError):
            ev("nback", 1, onset=2.0, offset=1.0)
        with pytest.raises(DataError):
            ev("tetris", 1)


class TestEvents:
    def test_jsonl_round_trip(self, tmp_path):
        events = [ev("nback", 2, trial=i, onset=i, offset=i + 1) for i in range(3)] + [ev("chess", 950.0, rt=None)]
        write_events_jsonl(events, tmp_path / "e.jsonl")
        assert read_events_jsonl(tmp_path / "e.jsonl") == events

    def test_bad_line_reports_location(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text(json.dumps({"participant": "P", "task": "nback", "block": 1, "trial": 0,
                                 "onset": 0, "offset": 1, "difficulty": 1}) + "\n{oops\n")
        with pytest.raises(DataError, match=":2:"):
            read_events_jsonl(p)

    def test_condition_intervals_merge(self):
        events = [ev("nback", 2, trial=i, onset=2.0 * i, offset=2.0 * i + 1.5) for i in range(3)]
        events.append(ev("nback", 0, trial=3, onset=6.0, offset=8.0))
        spans = condition_intervals(label_events(events))
        assert [(a, b, lab.workload) for a, b, lab in spans] == [(0.0, 5.5, 2), (6.0, 8.0, 0)]


class TestBehavioral:
    def test_log_rt(self):
        t = behavioral_table([ev("nback", 1, rt=1.0), ev("nback", 1, trial=1, rt=math.e)])
        assert t["log_rt"].tolist() == [0.0, 1.0]

    def test_chess_timeout(self):
        events = [ev("chess", r, trial=i, rt=5.0) for i, r in enumerate([800, 900, 1000, 1100])]
        events.append(ev("chess", 900, trial=9, rt=30.0, correct=True))
        t = behavioral_table(events)
        last = t.iloc[-1]
        assert bool(last["timeout"]) and not bool(last["correct"])
        assert pd.isna(last["rt_s"]) and pd.isna(last["log_rt"])

    def test_negative_rt(self):
        with pytest.raises(DataError):
            behavioral_table([ev("nback", 1, rt=-0.5)])


def feature_rows(rng, n_participants=2):
    rows = []
    for p in range(n_participants):
        for task in ("nback", "stroop"):
            for block in (1, 2):
                for level in ((0, 2) if task == "nback" else (0, 1)):
                    for k in range(3):
                        rows.append([f"P{p}", task, block, level, float(k)] + rng.normal(size=7).tolist())
    return pd.DataFrame(rows, columns=["participant", "task", "block", "workload", "epoch_start_s",
                                       *DEFAULT_BANDS.names])


class TestStatsExport:
    def test_cell_mean(self):
        df = pd.DataFrame({"participant": ["P"] * 2, "task": ["nback"] * 2, "block": [1, 1], "workload": [2, 2],
                           "epoch_start_s": [0.0, 1.0], **{b: [1.0, 3.0] for b in DEFAULT_BANDS.names}})
        t = export_stats_table(df)
        assert (t["mean_log_power"] == 2.0).all()

    def test_single_cell_degenerate(self):
        df = pd.DataFrame({"participant": ["P"], "task": ["nback"], "block": [1], "workload": [2],
                           "epoch_start_s": [0.0], **{b: [1.5] for b in DEFAULT_BANDS.names}})
        t = export_stats_table(df)
        assert (t["z"] == 0).all() and t["degenerate"].all()

    def test_z_standardised(self, rng):
        t = export_stats_table(feature_rows(rng))
        g = t.groupby(["participant", "task", "band"])["z"]
        np.testing.assert_allclose(g.mean(), 0, atol=1e-9)
        np.testing.assert_allclose(g.std(ddof=0), 1, atol=1e-9)

    def test_completeness(self, rng):
        df = feature_rows(rng)
        t = export_stats_table(df)
        cells = df.groupby(["participant", "task", "block", "workload"]).size()
        assert len(t) == len(cells) * 7
        assert not t.duplicated(["participant", "task", "block", "workload", "band"]).any()

    def test_round_trip_identical(self, rng, tmp_path):
        t = export_stats_table(feature_rows(rng))
        write_stats_table(t, tmp_path / "s.csv")
        back = read_stats_table(tmp_path / "s.csv")
        np.testing.assert_array_equal(back["mean_log_power"].to_numpy(), t["mean_log_power"].to_numpy())
        np.testing.assert_array_equal(back["z"].to_numpy(), t["z"].to_numpy())


class TestManifest:
    def write(self, tmp_path, participants):
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps({"participants": participants}))
        return p

    def entry(self, pid, phase="II", tasks=TASKS):
        return {"participant": pid, "phase": phase, "recordings": {t: f"{pid}_{t}.csv" for t in tasks},
                "rest": f"{pid}_rest.csv", "events": f"{pid}.jsonl"}

    def test_empty_warns(self, tmp_path):
        with pytest.warns(UserWarning):
            assert load_manifest(self.write(tmp_path, [])) == []

    def test_phase_two_requires_chess(self, tmp_path):
        e = self.entry("P1", tasks=("nback", "rotation", "stroop"))
        with pytest.raises(ManifestError, match="chess"):
            load_manifest(self.write(tmp_path, [e]))

    def test_two_participants(self, tmp_path):
        ms = load_manifest(self.write(tmp_path, [self.entry("P1"), self.entry("P2", "I", ("nback",))]))
        assert [m.participant for m in ms] == ["P1", "P2"]
        assert ms[0].missing  # files were never written
        assert ms[1].tasks == ("nback",)

    def test_malformed_json_location(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{"participants": [\n  {"participant": "P1",,}\n]}')
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(p)

    def test_bad_phase(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(self.write(tmp_path, [self.entry("P1", phase="III")]))
