from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg
from scipy.stats import median_abs_deviation

from eegworkload.artifact import (ASRModel, CalibrationError, EpochMask, RejectThresholds,
                                  asr_calibrate, asr_process, clean_rest, cv_reject_errors,
                                  estimate_reject_thresholds, gate_epochs, participant_inclusion,
                                  split_fixed_epochs)
from eegworkload.signal_core import FRONTAL_CHANNELS, Recording

from conftest import FS


def brute_cv_error(x, thr, folds, seed):
    """The rejection objective written out longhand."""
    order = np.random.default_rng(seed).permutation(len(x))
    # array_split puts the remainder in the first folds
    base, extra = divmod(len(x), folds)
    sizes = [base + (1 if i < extra else 0) for i in range(folds)]
    total, pos = 0.0, 0
    for size in sizes:
        test = set(order[pos:pos + size].tolist())
        pos += size
        train = [i for i in range(len(x)) if i not in test and x[i].max() - x[i].min() <= thr]
        if not train:
            return np.inf
        mean = sum(x[i] for i in train) / len(train)
        med = np.median(np.array([x[i] for i in sorted(test)]), axis=0)
        total += float(np.sqrt(np.mean((mean - med) ** 2)))
    return total / folds


def rest_like(rng, n_epochs=10, n=512, scale=5.0):
    return rng.normal(0, scale, size=(n_epochs, 2, n))


class TestRejectThresholds:
    def test_small_epochs_tie_to_largest(self, rng):
        x = rest_like(rng)
        x *= 15.0 / np.ptp(x, axis=-1, keepdims=True).max()
        assert np.ptp(x, axis=-1).max() <= 30.0
        th = estimate_reject_thresholds(x, [50, 100, 200], folds=5, seed=1)
        np.testing.assert_array_equal(th.values, [200.0, 200.0])

    def test_matches_brute_force_objective(self, rng):
        x = rest_like(rng, n_epochs=10)
        x[3, 0] *= 12.0
        grid = [20.0, 40.0, 80.0, 160.0, 320.0, 640.0]
        got = cv_reject_errors(x[:, 0], grid, folds=5, seed=3)
        want = [brute_cv_error(x[:, 0], g, 5, 3) for g in grid]
        np.testing.assert_allclose(got, want, rtol=1e-12)
        chosen = estimate_reject_thresholds(x, grid, folds=5, seed=3).values[0]
        best = min(want)
        assert chosen == max(g for g, w in zip(grid, want) if w <= best * (1 + 1e-12))

    def test_outlier_excluded(self, rng):
        x = rest_like(rng, n_epochs=20)
        spike = np.zeros(512)
        spike[200:210] = 500.0
        x[7, 0] += spike
        th = estimate_reject_thresholds(x, [50, 100, 200, 400, 800], folds=5, seed=0)
        assert th.values[0] < np.ptp(x[7, 0])
        kept = clean_rest(x, th)
        assert len(kept) == 19

    def test_identical_epochs_pick_largest(self):
        x = np.tile(np.sin(np.linspace(0, 6, 256)) * 10, (12, 2, 1))
        th = estimate_reject_thresholds(x, [30, 60, 90], folds=4)
        np.testing.assert_array_equal(th.values, [90.0, 90.0])

    def test_deterministic(self, rng):
        x = rest_like(rng, 30)
        x[::7] *= 8
        a = estimate_reject_thresholds(x, folds=10, seed=5)
        b = estimate_reject_thresholds(x, folds=10, seed=5)
        np.testing.assert_array_equal(a.values, b.values)

    def test_everything_rejected(self, rng):
        x = rest_like(rng, 10, scale=100.0)
        with pytest.raises(CalibrationError):
            estimate_reject_thresholds(x, [1.0, 2.0], folds=5)

    def test_preconditions(self, rng):
        with pytest.raises(ValueError):
            estimate_reject_thresholds(rest_like(rng, 4), folds=5)
        with pytest.raises(ValueError):
            estimate_reject_thresholds(rest_like(rng, 10), [100, 50], folds=5)

    def test_invalid_thresholds(self):
        with pytest.raises(ValueError):
            RejectThresholds(("a",), np.array([0.0]))
        with pytest.raises(ValueError):
            RejectThresholds(("a",), np.array([np.inf]))

    def test_round_trip(self):
        th = RejectThresholds(("AF7", "AF8"), np.array([80.0, 125.0]))
        back = RejectThresholds.from_dict(th.to_dict())
        assert back.channels == th.channels
        np.testing.assert_array_equal(back.values, th.values)


class TestCleanRest:
    def test_all_zero_kept(self):
        x = np.zeros((5, 2, 100))
        assert len(clean_rest(x, RejectThresholds(("a", "b"), np.array([1.0, 1.0])))) == 5

    def test_spike_on_one_channel_dropped(self):
        x = np.zeros((3, 2, 100))
        x[1, 1, 50] = 60.0
        kept = clean_rest(x, RejectThresholds(("a", "b"), np.array([100.0, 50.0])))
        assert len(kept) == 2

    @given(st.lists(st.floats(0, 200), min_size=2, max_size=30), st.floats(10, 150), st.floats(10, 150))
    def test_kept_count_matches_brute_force(self, amps, t0, t1):
        x = np.zeros((len(amps), 2, 8))
        for i, a in enumerate(amps):
            x[i, 0, 3] = a
            x[i, 1, 5] = -a / 2
        th = RejectThresholds(("a", "b"), np.array([t0, t1]))
        want = sum(1 for a in amps if a <= t0 and a / 2 <= t1)
        if want == 0:
            with pytest.raises(CalibrationError):
                clean_rest(x, th)
        else:
            assert len(clean_rest(x, th)) == want

    def test_split_fixed_epochs_skips_gaps(self):
        rec = Recording(FS, FRONTAL_CHANNELS, np.zeros((2, 5 * 512)), gaps=((600, 700),))
        ep = split_fixed_epochs(rec, 2.0)
        # [0, 600) holds one 2 s epoch, [700, 2560) holds three
        assert ep.shape == (4, 2, 512)


# ---------------------------------------------------------------------------
# ASR

def calib_recording(rng, seconds=60.0, scale=10.0):
    mix = np.array([[1.0, 0.4], [0.3, 1.0]])
    x = mix @ rng.standard_normal((2, int(seconds * FS))) * scale
    return Recording(FS, FRONTAL_CHANNELS, x)


def naive_asr(model: ASRModel, calib: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-window ASR with explicit covariance and scipy matrix square root."""
    n = model.window_samples
    hop = n // 2
    c, t = x.shape
    m = np.real(linalg.sqrtm(calib @ calib.T / calib.shape[1]))
    w = np.sin(np.pi * np.arange(n) / n) ** 2
    out = np.zeros_like(x)
    max_removed = int(model.max_dims * c)
    for s in range(-hop, t, hop):
        lo, hi = max(s, 0), min(s + n, t)
        seg = x[:, lo:hi]
        cov = seg @ seg.T / max(hi - lo, 1)
        d, v = np.linalg.eigh(cov)
        keep = np.array([d[i] < np.sum((model.component_thresholds[:, None] * model.basis.T @ v[:, i]) ** 2)
                         for i in range(c)])
        keep[:c - max_removed] = True
        r = np.eye(c) if keep.all() else m @ np.linalg.pinv(np.diag(keep.astype(float)) @ v.T @ m) @ v.T
        out[:, lo:hi] += w[lo - s:hi - s] * (r @ seg)
    return out


def burst(x, start, n, amp, channels=(0,)):
    y = x.copy()
    for ch in channels:
        y[ch, start:start + n] += amp
    return y


class TestASR:
    def test_thresholds_match_recomputed_statistics(self, rng):
        rec = Recording(FS, FRONTAL_CHANNELS, rng.standard_normal((2, int(60 * FS))) * 10)
        model = asr_calibrate(rec, cutoff=20.0)
        comps = model.basis.T @ rec.data
        n = 128
        rms = np.array([[np.sqrt(np.mean(comps[i, s:s + n] ** 2))
                         for s in range(0, comps.shape[1] - n + 1, n // 2)] for i in range(2)])
        want = np.median(rms, axis=1) + 20 * median_abs_deviation(rms, axis=1, scale="normal")
        np.testing.assert_allclose(model.component_thresholds, want, rtol=1e-4)

    def test_mixing_is_covariance_square_root(self, rng):
        rec = calib_recording(rng)
        model = asr_calibrate(rec)
        cov = rec.data @ rec.data.T / rec.n_samples
        np.testing.assert_allclose(model.mixing, np.real(linalg.sqrtm(cov)), rtol=1e-10)

    def test_identical_channels_rank_deficient(self, rng):
        x = rng.standard_normal(int(40 * FS))
        with pytest.raises(CalibrationError):
            asr_calibrate(Recording(FS, FRONTAL_CHANNELS, np.stack([x, x])))

    def test_needs_thirty_seconds(self, rng):
        with pytest.raises(CalibrationError):
            asr_calibrate(calib_recording(rng, seconds=29.0))

    def test_gaps_do_not_count(self, rng):
        rec = calib_recording(rng, seconds=35.0)
        rec = Recording(FS, rec.channels, rec.data, gaps=((0, int(10 * FS)),))
        with pytest.raises(CalibrationError):
            asr_calibrate(rec)

    def test_scaling_homogeneity(self, rng):
        rec = calib_recording(rng)
        a = asr_calibrate(rec)
        b = asr_calibrate(rec.with_data(2 * rec.data))
        np.testing.assert_allclose(b.component_thresholds, 2 * a.component_thresholds, rtol=1e-10)

    def test_near_identity_on_calibration_data(self, rng):
        rec = calib_recording(rng)
        out = asr_process(asr_calibrate(rec), rec).data
        rel = np.sqrt(np.mean((out - rec.data) ** 2) / np.mean(rec.data ** 2))
        assert rel <= 0.10

    def test_pass_through_is_exact(self, rng):
        rec = calib_recording(rng)
        model = asr_calibrate(rec)
        task = calib_recording(np.random.default_rng(99), seconds=20.0)
        out = asr_process(model, task)
        np.testing.assert_array_equal(out.data, task.data)

    @pytest.mark.parametrize("channels", [(0,), (1,), (0, 1)])
    def test_burst_suppressed(self, rng, channels):
        rec = calib_recording(rng)
        model = asr_calibrate(rec)
        task = calib_recording(np.random.default_rng(5), seconds=20.0).data
        start, n = int(8 * FS), int(0.2 * FS)
        dirty = burst(task, start, n, 500.0, channels)
        out = asr_process(model, rec.with_data(dirty)).data
        win = slice(start, start + n)
        assert np.abs(out[:, win]).max() <= 0.5 * np.abs(dirty[:, win]).max()

    @given(amp=st.floats(200, 2000), start=st.integers(256, 4000), ch=st.sampled_from([(0,), (1,), (0, 1)]),
           sign=st.sampled_from([-1.0, 1.0]))
    def test_burst_energy_never_grows(self, amp, start, ch, sign):
        rng = np.random.default_rng(0)
        rec = calib_recording(rng)
        model = asr_calibrate(rec)
        task = calib_recording(np.random.default_rng(1), seconds=20.0).data
        n = int(0.2 * FS)
        dirty = burst(task, start, n, sign * amp, ch)
        out = asr_process(model, rec.with_data(dirty)).data
        win = slice(start, start + n)
        assert out[:, win].var() <= dirty[:, win].var()
        assert np.all(np.isfinite(out))

    def test_matches_naive_reference(self, rng):
        rec = calib_recording(rng)
        model = asr_calibrate(rec)
        task = calib_recording(np.random.default_rng(8), seconds=10.0).data
        dirty = burst(burst(task, 700, 60, 400.0, (0,)), 1500, 40, -300.0, (0, 1))
        out = asr_process(model, rec.with_data(dirty)).data
        np.testing.assert_allclose(out, naive_asr(model, rec.data, dirty), rtol=1e-8, atol=1e-8)

    def test_zero_in_zero_out(self, rng):
        model = asr_calibrate(calib_recording(rng))
        z = Recording(FS, FRONTAL_CHANNELS, np.zeros((2, 2000)))
        assert np.all(asr_process(model, z).data == 0)

    def test_length_preserved(self, rng):
        model = asr_calibrate(calib_recording(rng))
        task = calib_recording(np.random.default_rng(2), seconds=3.3)
        assert asr_process(model, task).n_samples == task.n_samples

    def test_mismatches(self, rng):
        model = asr_calibrate(calib_recording(rng))
        with pytest.raises(ValueError):
            asr_process(model, Recording(FS, ("AF7",), np.zeros((1, 100))))
        with pytest.raises(ValueError):
            asr_process(model, Recording(512.0, FRONTAL_CHANNELS, np.zeros((2, 100))))

    def test_save_load(self, rng, tmp_path):
        model = asr_calibrate(calib_recording(rng))
        model.save(tmp_path / "m.json")
        back = ASRModel.load(tmp_path / "m.json")
        task = calib_recording(np.random.default_rng(3), seconds=5.0)
        dirty = task.with_data(burst(task.data, 300, 50, 600.0))
        np.testing.assert_array_equal(asr_process(back, dirty).data, asr_process(model, dirty).data)


# ---------------------------------------------------------------------------
# gate and inclusion

class TestGate:
    def test_150uv_excluded(self):
        x = np.zeros((1, 2, 256))
        x[0, 0, 10] = 150.0
        assert not gate_epochs(x, 100.0).keep[0]

    def test_zero_kept(self):
        assert gate_epochs(np.zeros((3, 2, 256))).keep.all()

    def test_boundary_kept(self):
        x = np.zeros((2, 2, 256))
        x[0, 0, 5] = 100.0
        x[1, 1, 5] = -100.0
        assert gate_epochs(x, 100.0).keep.all()

    def test_limit_must_be_positive(self):
        with pytest.raises(ValueError):
            gate_epochs(np.zeros((1, 2, 4)), 0.0)

    @given(st.lists(st.floats(-300, 300), min_size=1, max_size=20))
    def test_idempotent(self, peaks):
        x = np.zeros((len(peaks), 2, 16))
        x[:, 0, 3] = peaks
        m = gate_epochs(x)
        kept = x[m.keep]
        assert gate_epochs(kept).keep.all()
        assert 0.0 <= m.kept_fraction <= 1.0

    def test_mask_jsonl_round_trip(self, tmp_path):
        m = EpochMask([True, False, True])
        m.to_jsonl(tmp_path / "m.jsonl")
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert '"epoch_index": 1' in lines[1] and '"kept": false' in lines[1]
        back = EpochMask.from_jsonl(tmp_path / "m.jsonl")
        np.testing.assert_array_equal(back.keep, m.keep)
        assert back.reasons == m.reasons


class TestInclusion:
    def mask(self, n_bad, n=100):
        return EpochMask(np.arange(n) >= n_bad)

    def test_65_percent_excluded(self):
        assert participant_inclusion(self.mask(65)) == "exclude"

    def test_none_excluded(self):
        assert participant_inclusion(self.mask(0)) == "include"

    def test_exactly_60_percent(self):
        assert participant_inclusion(self.mask(60)) == "exclude"
        assert participant_inclusion(self.mask(3, 5)) == "exclude"

    def test_just_below(self):
        assert participant_inclusion(self.mask(59)) == "include"

    def test_empty(self):
        with pytest.raises(ValueError):
            participant_inclusion(EpochMask(np.zeros(0, dtype=bool), []))
