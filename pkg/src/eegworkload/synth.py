"""Synthetic datasets with planted effects.

Two generators share one :class:`SynthSpec`:

* :func:`synth_features` draws log band powers directly (fast fixtures for
  the classifier and cross-validation tests);
* :func:`synth_dataset` writes raw two-channel recordings, a rest recording,
  trial event logs, a puzzle bank and a manifest that the full pipeline can
  consume.

Each band carries a 1/f baseline; a condition scales the amplitude of a band
by ``exp(shift / 2)``, i.e. adds ``shift`` to its log power.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import (TrialEvent, binary_class, chess_quartile_labels, write_events_jsonl,
                      write_manifest, ParticipantManifest)
from .signal_core import FRONTAL_CHANNELS, Recording, write_recording_csv
from .spectral import DEFAULT_BANDS, FEATURE_COLUMNS, TASKS
from .staircase import PuzzleBank, SimPlayer, load_bank, run_session, synthetic_bank, write_bank_csv

logger = logging.getLogger(__name__)

TASK_LEVELS = {"nback": (0, 1, 2, 3), "rotation": (0, 1, 2, 3), "stroop": (0, 1), "chess": (0, 1, 2, 3)}
ROTATION_DEGREES = (0, 50, 100, 150)
BASE_RMS = 6.0        # µV, broadband background
LINE_NOISE = 15.0     # µV at 60 Hz
DC_OFFSET = 40.0      # µV
REST_SECONDS = 90
BLOCK_GAP_SECONDS = 10
LEAD_SECONDS = 4
CHESS_TRIAL_SECONDS = 5


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic study.

    ``shifts`` maps a condition to per-band log-power offsets. A condition is
    a binary class (``"low"``/``"high"``), a task name, or ``"task:level"``;
    every matching offset is added.
    """

    participants: int = 4
    blocks_per_task: int = 5
    epochs_per_condition: int = 20
    shifts: dict = field(default_factory=lambda: {"high": {"theta": 1.0, "alpha1": 1.0}})
    noise: float = 0.35
    artifact_rate: float = 0.0
    saturated_participants: tuple = ()
    saturation: float = 0.65
    tasks: tuple = TASKS
    sample_rate: float = 256.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.artifact_rate <= 1.0:
            raise ValueError("artifact_rate must lie in [0, 1]")
        if not 0.0 <= self.saturation <= 1.0:
            raise ValueError("saturation must lie in [0, 1]")
        for cond, bands in self.shifts.items():
            for b, v in bands.items():
                if b not in DEFAULT_BANDS.names:
                    raise ValueError(f"unknown band {b!r} in shifts[{cond!r}]")
                if not np.isfinite(v):
                    raise ValueError("shifts must be finite")
        if self.participants < 1 or self.blocks_per_task < 1 or self.epochs_per_condition < 1:
            raise ValueError("participants, blocks and epochs must be positive")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")

    def participant_ids(self):
        return [f"P{i + 1:02d}" for i in range(self.participants)]

    def shift_vector(self, task: str, level: int) -> np.ndarray:
        keys = (binary_class(task, level), task, f"{task}:{level}")
        out = np.zeros(len(DEFAULT_BANDS))
        for k in keys:
            for b, v in self.shifts.get(k, {}).items():
                out[DEFAULT_BANDS.names.index(b)] += v
        return out

    def to_dict(self):
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["saturated_participants"] = list(self.saturated_participants)
        return d

    @classmethod
    def from_dict(cls, d) -> "SynthSpec":
        d = dict(d)
        for k in ("tasks", "saturated_participants"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def baseline_log_power(scheme=DEFAULT_BANDS, rms: float = BASE_RMS) -> np.ndarray:
    """Log band powers of a 1/f density normalised to ``rms`` over 1-45 Hz."""
    lo = np.array([b[1] for b in scheme.bands])
    hi = np.array([b[2] for b in scheme.bands])
    total = np.log(45.0)  # integral of 1/f over [1, 45]
    return np.log(rms ** 2 * np.log(hi / lo) / total)


# ---------------------------------------------------------------------------
# feature-level generator

def synth_features(spec: SynthSpec) -> pd.DataFrame:
    """Feature table drawn directly in log-power space.

    Every block holds every level of its task, ``epochs_per_condition`` rows
    each. Rows get a per-participant offset, the condition shifts and
    independent Gaussian noise of SD ``noise``.
    """
    rng = np.random.default_rng([spec.seed, 1])
    base = baseline_log_power()
    rows = []
    for p in spec.participant_ids():
        offset = rng.normal(0.0, 0.3, size=len(base))
        for task in spec.tasks:
            for block in range(1, spec.blocks_per_task + 1):
                t = 0.0
                for level in rng.permutation(TASK_LEVELS[task]):
                    mu = base + offset + spec.shift_vector(task, int(level))
                    x = mu + rng.normal(0.0, spec.noise, size=(spec.epochs_per_condition, len(base)))
                    for r in x:
                        rows.append((p, task, block, int(level), t, *r))
                        t += 1.0
    return pd.DataFrame(rows, columns=list(FEATURE_COLUMNS))


# ---------------------------------------------------------------------------
# signal-level generator

def _band_noise(n: int, fs: float, lo: float, hi: float, rng) -> np.ndarray:
    """Unit-variance Gaussian noise band-limited to ``[lo, hi)`` by FFT masking."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(f < lo) | (f >= hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / x.std()


def _pair(n, fs, lo, hi, rng, rho=0.5):
    common = _band_noise(n, fs, lo, hi, rng)
    a = np.sqrt(rho) * common + np.sqrt(1 - rho) * _band_noise(n, fs, lo, hi, rng)
    b = np.sqrt(rho) * common + np.sqrt(1 - rho) * _band_noise(n, fs, lo, hi, rng)
    return np.stack([a, b])


def synth_signal(log_power: np.ndarray, fs: float, rng, line_noise: float = LINE_NOISE,
                 dc: float = DC_OFFSET) -> np.ndarray:
    """Two correlated frontal channels with per-second band log powers.

    Parameters
    ----------
    log_power : ndarray, shape (n_seconds, n_bands)
        Target log power (µV²) of each band in each second.
    """
    n_sec = log_power.shape[0]
    spc = int(round(fs))
    n = n_sec * spc
    out = np.zeros((2, n))
    for j, (_, lo, hi) in enumerate(DEFAULT_BANDS.bands):
        gain = np.repeat(np.exp(log_power[:, j] / 2.0), spc)
        out += _pair(n, fs, lo, hi, rng) * gain
    # weak out-of-band background so the filters have something to remove
    out += 0.3 * BASE_RMS * _pair(n, fs, 0.5, 4.0, rng)
    out += 0.1 * BASE_RMS * _pair(n, fs, 45.0, fs / 2, rng)
    t = np.arange(n) / fs
    phase = rng.uniform(0, 2 * np.pi)
    out += line_noise * np.sin(2 * np.pi * 60.0 * t + phase)
    out += dc
    return out


def inject_blinks(data: np.ndarray, fs: float, seconds, rng, amplitude=(250.0, 450.0)) -> None:
    """Add a 0.3 s raised-cosine deflection inside each listed second, in place."""
    m = int(round(0.3 * fs))
    shape = np.hanning(m)
    spc = int(round(fs))
    for s in seconds:
        i0 = int(s) * spc + int(rng.integers(0, spc - m))
        amp = rng.uniform(*amplitude)
        data[0, i0:i0 + m] += amp * shape
        data[1, i0:i0 + m] += 0.8 * amp * shape


def inject_saturation(data: np.ndarray, fs: float, seconds, rng, level=(500.0, 800.0)) -> None:
    """Hold each channel at a large offset for 0.2 s inside each listed second.

    The two channels saturate at different times with different signs, so
    the artifact spans both components and cannot be projected out of two
    channels.
    """
    m = int(round(0.2 * fs))
    spc = int(round(fs))
    for s in seconds:
        for ch, sign in ((0, 1.0), (1, -1.0)):
            i0 = int(s) * spc + int(rng.integers(0, spc - m))
            data[ch, i0:i0 + m] += sign * rng.uniform(*level)


def _trials_for_block(task, block, levels, t0, spec, rng, ratings=None):
    """Events covering one block; returns ``(events, per-second levels, t_end)``."""
    events = []
    per_second = []
    t = t0
    k = 0
    if task == "chess":
        for level, rating in zip(levels, ratings):
            rt = float(rng.uniform(4.0, 40.0))
            events.append(dict(task=task, block=block, trial=k, onset=t, offset=t + CHESS_TRIAL_SECONDS,
                               difficulty=float(rating), correct=bool(rng.random() < 0.5),
                               rt=min(rt, 30.0) if rt < 30.0 else None))
            per_second += [level] * CHESS_TRIAL_SECONDS
            t += CHESS_TRIAL_SECONDS
            k += 1
        return events, per_second, t
    for level in levels:
        # two-second trials covering the condition span
        for _ in range(spec.epochs_per_condition // 2):
            if task == "rotation":
                diff = ROTATION_DEGREES[level]
            else:
                diff = int(level)
            events.append(dict(task=task, block=block, trial=k, onset=t, offset=t + 2.0,
                               difficulty=diff, correct=bool(rng.random() < 0.8),
                               rt=float(rng.lognormal(-0.5, 0.3))))
            t += 2.0
            k += 1
        per_second += [level] * (2 * (spec.epochs_per_condition // 2))
    return events, per_second, t


def synth_participant(spec: SynthSpec, pid: str, index: int, bank: PuzzleBank):
    """Rest recording, task recordings and events for one participant."""
    rng = np.random.default_rng([spec.seed, 2, index])
    fs = spec.sample_rate
    base = baseline_log_power() + rng.normal(0.0, 0.3, size=len(DEFAULT_BANDS))
    saturated = pid in spec.saturated_participants
    rest_lp = base + rng.normal(0.0, spec.noise, size=(REST_SECONDS, len(base)))
    rest = Recording(fs, FRONTAL_CHANNELS, synth_signal(rest_lp, fs, rng))
    recordings, events = {}, []
    for task in spec.tasks:
        t = float(LEAD_SECONDS)
        per_second = [None] * LEAD_SECONDS
        if task == "chess":
            n_chess = max(4, 4 * spec.epochs_per_condition // CHESS_TRIAL_SECONDS)
            player = SimPlayer(float(rng.uniform(1000, 1800)), int(rng.integers(2**31)))
            traj = run_session(bank, player, rounds=spec.blocks_per_task, per_round=n_chess)
            ratings = traj["rating"].to_numpy()
            qmap = chess_quartile_labels(ratings)
        for block in range(1, spec.blocks_per_task + 1):
            if task == "chess":
                r = ratings[(block - 1) * n_chess:block * n_chess]
                levels = [qmap[float(x)] for x in r]
                evs, secs, t = _trials_for_block(task, block, levels, t, spec, rng, r)
            else:
                levels = [int(v) for v in rng.permutation(TASK_LEVELS[task])]
                evs, secs, t = _trials_for_block(task, block, levels, t, spec, rng)
            events += [TrialEvent(participant=pid, **e) for e in evs]
            per_second += secs + [None] * BLOCK_GAP_SECONDS
            t += BLOCK_GAP_SECONDS
        lp = np.array([base + (spec.shift_vector(task, lv) if lv is not None else 0.0)
                       for lv in per_second])
        lp += rng.normal(0.0, spec.noise, size=lp.shape)
        data = synth_signal(lp, fs, rng)
        labelled = [i for i, lv in enumerate(per_second) if lv is not None]
        rate = spec.saturation if saturated else spec.artifact_rate
        n_bad = int(round(rate * len(labelled)))
        if n_bad:
            bad = rng.choice(labelled, size=n_bad, replace=False)
            if saturated:
                inject_saturation(data, fs, np.sort(bad), rng)
            else:
                inject_blinks(data, fs, np.sort(bad), rng)
        recordings[task] = Recording(fs, FRONTAL_CHANNELS, data)
    return rest, recordings, events


def synth_dataset(spec: SynthSpec, out_dir) -> Path:
    """Write a full synthetic study under ``out_dir``; returns the manifest path.

    Layout: ``recordings/<pid>_<task>.csv``, ``recordings/<pid>_rest.csv``,
    ``events/<pid>.jsonl``, ``puzzles.csv``, ``manifest.json`` and
    ``synth_spec.json``.
    """
    out = Path(out_dir)
    (out / "recordings").mkdir(parents=True, exist_ok=True)
    (out / "events").mkdir(parents=True, exist_ok=True)
    bank_df = synthetic_bank(per_bin=40, seed=spec.seed)
    write_bank_csv(bank_df, out / "puzzles.csv")
    bank = load_bank(out / "puzzles.csv")
    manifests = []
    for i, pid in enumerate(spec.participant_ids()):
        rest, recs, events = synth_participant(spec, pid, i, bank)
        rest_path = out / "recordings" / f"{pid}_rest.csv"
        write_recording_csv(rest, rest_path)
        paths = {}
        for task, rec in recs.items():
            paths[task] = out / "recordings" / f"{pid}_{task}.csv"
            write_recording_csv(rec, paths[task])
        ev_path = out / "events" / f"{pid}.jsonl"
        write_events_jsonl(events, ev_path)
        phase = "II" if set(spec.tasks) == set(TASKS) else "I"
        manifests.append(ParticipantManifest(pid, phase, paths, rest_path, ev_path))
        logger.info("synthesised %s", pid)
    manifest = out / "manifest.json"
    write_manifest(manifests, manifest)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return manifest
