"""Rest-calibrated artifact handling.

Three stages, in pipeline order:

1. ``estimate_reject_thresholds`` / ``clean_rest``: a reject-only, per-channel
   peak-to-peak threshold chosen by K-fold cross-validation on 2 s rest epochs.
2. ``asr_calibrate`` / ``asr_process``: artifact subspace reconstruction
   calibrated on the cleaned rest data and applied to task data.
3. ``gate_epochs`` / ``participant_inclusion``: the absolute amplitude gate
   on 1 s epochs and the per-participant exclusion rule.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal_core import Recording

logger = logging.getLogger(__name__)

DEFAULT_REJECT_GRID = (40.0, 50.0, 60.0, 80.0, 100.0, 125.0, 150.0, 200.0,
                       250.0, 300.0, 400.0, 500.0, 750.0, 1000.0)
MIN_CALIBRATION_SECONDS = 30.0
MAD_TO_SD = 1.4826


class CalibrationError(RuntimeError):
    """Artifact calibration could not produce a usable model."""


# ---------------------------------------------------------------------------
# peak-to-peak rejection thresholds

@dataclass(frozen=True)
class RejectThresholds:
    channels: tuple
    values: np.ndarray  # µV peak-to-peak, one per channel

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.channels),) or not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("thresholds must be positive, finite, one per channel")
        object.__setattr__(self, "values", v)

    def to_dict(self):
        return {"channels": list(self.channels), "thresholds_uv": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["channels"]), np.asarray(d["thresholds_uv"]))


def peak_to_peak(epochs: np.ndarray) -> np.ndarray:
    """``(n_epochs, n_channels)`` peak-to-peak amplitude."""
    return np.ptp(epochs, axis=-1)


def _fold_ids(n, folds, seed):
    rng = np.random.default_rng(seed)
    return np.array_split(rng.permutation(n), folds)


def cv_reject_errors(channel_epochs: np.ndarray, grid, folds: int = 10, seed: int = 0) -> np.ndarray:
    """Cross-validation error of every grid threshold for one channel.

    For each fold, training epochs with peak-to-peak above the threshold are
    dropped; the error is the RMS distance between the mean of the remaining
    training epochs and the pointwise median of the held-out fold. Errors are
    averaged over folds; a threshold that drops every training epoch of any
    fold scores ``inf``.

    Parameters
    ----------
    channel_epochs : ndarray, shape (n_epochs, n_times)
    """
    x = np.asarray(channel_epochs, dtype=np.float64)
    ptp = np.ptp(x, axis=-1)
    splits = _fold_ids(len(x), folds, seed)
    errors = np.zeros(len(grid))
    for test in splits:
        train = np.setdiff1d(np.arange(len(x)), test)
        median = np.median(x[test], axis=0)
        for g, thr in enumerate(grid):
            kept = train[ptp[train] <= thr]
            if kept.size == 0:
                errors[g] = np.inf
                continue
            errors[g] += np.sqrt(np.mean((x[kept].mean(axis=0) - median) ** 2))
    return errors / len(splits)


def estimate_reject_thresholds(rest_epochs, candidate_grid=DEFAULT_REJECT_GRID,
                               folds: int = 10, seed: int = 0,
                               channels=None) -> RejectThresholds:
    """Pick, per channel, the grid threshold with the lowest CV error.

    Ties (within 1e-12 relative) go to the larger threshold.

    Parameters
    ----------
    rest_epochs : ndarray, shape (n_epochs, n_channels, n_times)
    candidate_grid : sequence of float
        Ascending µV peak-to-peak candidates.
    folds : int
        Number of CV folds; at least this many epochs are required.
    """
    x = np.asarray(rest_epochs, dtype=np.float64)
    grid = np.asarray(candidate_grid, dtype=np.float64)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("candidate_grid must be strictly ascending")
    if x.ndim != 3 or x.shape[0] < folds:
        raise ValueError(f"need at least {folds} epochs shaped (epochs, channels, times)")
    if channels is None:
        channels = tuple(f"ch{i}" for i in range(x.shape[1]))
    chosen = []
    for c in range(x.shape[1]):
        err = cv_reject_errors(x[:, c], grid, folds, seed)
        if not np.any(np.isfinite(err)):
            raise CalibrationError(f"channel {channels[c]}: every grid value rejects all epochs")
        best = np.min(err)
        tol = 1e-12 * max(abs(best), 1e-300)
        ties = np.flatnonzero(err <= best + tol)
        chosen.append(grid[ties[-1]])
    return RejectThresholds(tuple(channels), np.array(chosen))


def clean_rest(rest_epochs, thresholds: RejectThresholds) -> np.ndarray:
    """Keep epochs whose every channel is within its peak-to-peak threshold."""
    x = np.asarray(rest_epochs, dtype=np.float64)
    keep = np.all(peak_to_peak(x) <= thresholds.values[None, :], axis=1)
    if not keep.any():
        raise CalibrationError("no rest epoch survives the rejection thresholds")
    return x[keep]


def split_fixed_epochs(rec: Recording, seconds: float) -> np.ndarray:
    """Consecutive non-overlapping epochs that avoid gaps."""
    n = int(round(seconds * rec.sample_rate))
    out = []
    for a, b in rec.segments():
        for s in range(a, b - n + 1, n):
            out.append(rec.data[:, s:s + n])
    if not out:
        return np.zeros((0, len(rec.channels), n))
    return np.stack(out)


# ---------------------------------------------------------------------------
# artifact subspace reconstruction

@dataclass(frozen=True)
class ASRModel:
    """Calibrated ASR state; immutable and safe to share.

    ``mixing`` is the symmetric square root of the calibration covariance,
    ``basis`` its eigenvectors (columns) and ``component_thresholds`` the
    per-component RMS limits in the calibration eigenbasis.
    """

    channels: tuple
    sample_rate: float
    window: float
    cutoff: float
    max_dims: float
    mixing: np.ndarray
    basis: np.ndarray
    component_thresholds: np.ndarray

    @property
    def threshold_operator(self) -> np.ndarray:
        return self.component_thresholds[:, None] * self.basis.T

    @property
    def window_samples(self) -> int:
        return _window_samples(self.window, self.sample_rate)

    def to_dict(self):
        return {
            "format": "eegworkload.asr/1",
            "channels": list(self.channels),
            "sample_rate": self.sample_rate,
            "window_s": self.window,
            "cutoff_sd": self.cutoff,
            "max_dims": self.max_dims,
            "mixing": self.mixing.tolist(),
            "basis": self.basis.tolist(),
            "component_thresholds": self.component_thresholds.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["channels"]), float(d["sample_rate"]), float(d["window_s"]),
                   float(d["cutoff_sd"]), float(d["max_dims"]), np.asarray(d["mixing"]),
                   np.asarray(d["basis"]), np.asarray(d["component_thresholds"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _window_samples(window, fs):
    n = 2 * int(round(window * fs / 2))
    if n < 2:
        raise ValueError("ASR window too short")
    return n


def windowed_rms(x: np.ndarray, n: int) -> np.ndarray:
    """RMS of each component over windows of ``n`` samples, 50% overlap.

    Returns ``(n_components, n_windows)``.
    """
    hop = n // 2
    starts = np.arange(0, x.shape[1] - n + 1, hop)
    c = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x ** 2, axis=1)], axis=1)
    return np.sqrt((c[:, starts + n] - c[:, starts]) / n)


def robust_stats(values: np.ndarray, axis=-1):
    """Median and MAD-based standard deviation."""
    med = np.median(values, axis=axis)
    mad = np.median(np.abs(values - np.expand_dims(med, axis)), axis=axis)
    return med, MAD_TO_SD * mad


def asr_calibrate(clean_rest: Recording, cutoff: float = 20.0, window: float = 0.5,
                  max_dims: float = 0.66) -> ASRModel:
    """Fit ASR on clean calibration data (at least 30 s, gaps excluded)."""
    valid = clean_rest.data[:, clean_rest.valid_mask()]
    fs = clean_rest.sample_rate
    if valid.shape[1] < MIN_CALIBRATION_SECONDS * fs:
        raise CalibrationError(
            f"ASR needs >= {MIN_CALIBRATION_SECONDS:.0f} s of clean data, got {valid.shape[1] / fs:.1f} s")
    cov = valid @ valid.T / valid.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 1e-10 * max(evals[-1], np.finfo(float).tiny):
        raise CalibrationError("calibration covariance is rank deficient")
    mixing = (evecs * np.sqrt(evals)) @ evecs.T
    n = _window_samples(window, fs)
    rms = np.concatenate([windowed_rms(evecs.T @ clean_rest.data[:, a:b], n)
                          for a, b in clean_rest.segments() if b - a >= n], axis=1)
    mu, sd = robust_stats(rms, axis=1)
    thresholds = mu + cutoff * sd
    if not np.all(np.isfinite(thresholds)) or np.any(thresholds <= 0):
        raise CalibrationError("degenerate component thresholds")
    return ASRModel(tuple(clean_rest.channels), float(fs), float(window), float(cutoff),
                    float(max_dims), mixing, evecs, thresholds)


def _window_weights(n):
    # sin^2 windows at 50% overlap sum to one
    return np.sin(np.pi * np.arange(n) / n) ** 2


def asr_reconstruction_matrices(model: ASRModel, data: np.ndarray):
    """Per-window reconstruction matrices.

    Windows start at ``-hop`` so that every sample is covered by exactly two
    windows whose weights sum to one. Returns ``(starts, mats, tripped)``
    where ``tripped`` marks windows whose matrix is not the identity.
    """
    n_ch, n_t = data.shape
    n = model.window_samples
    hop = n // 2
    starts = np.arange(-hop, n_t, hop)
    # windowed second moments from cumulative sums over in-range samples
    prods = np.einsum("it,jt->ijt", data, data)
    csum = np.concatenate([np.zeros((n_ch, n_ch, 1)), np.cumsum(prods, axis=2)], axis=2)
    lo = np.clip(starts, 0, n_t)
    hi = np.clip(starts + n, 0, n_t)
    counts = np.maximum(hi - lo, 1)
    cov = (csum[:, :, hi] - csum[:, :, lo]) / counts
    cov = np.moveaxis(cov, 2, 0)
    evals, evecs = np.linalg.eigh(cov)
    t_op = model.threshold_operator
    limit = np.sum((t_op @ evecs) ** 2, axis=1)  # (windows, components)
    keep = evals < limit
    max_removed = int(np.fix(model.max_dims * n_ch))
    keep[:, : n_ch - max_removed] = True
    tripped = ~keep.all(axis=1)
    mats = np.broadcast_to(np.eye(n_ch), (len(starts), n_ch, n_ch)).copy()
    m = model.mixing
    for w in np.flatnonzero(tripped):
        v = evecs[w]
        mats[w] = m @ np.linalg.pinv(keep[w][:, None] * (v.T @ m)) @ v.T
    return starts, mats, tripped


def asr_process(model: ASRModel, task: Recording) -> Recording:
    """Reconstruct windows whose components exceed calibration limits.

    Each sample is a weighted blend of the two overlapping windows' outputs;
    windows that trip no threshold contribute the identity, so clean data is
    returned unchanged.
    """
    if not np.isclose(task.sample_rate, model.sample_rate):
        raise ValueError("task sample rate differs from the ASR model")
    if len(task.channels) != len(model.channels):
        raise ValueError(
            f"channel mismatch: model has {len(model.channels)}, task has {len(task.channels)}")
    x = task.data
    starts, mats, tripped = asr_reconstruction_matrices(model, x)
    out = x.copy()
    n = model.window_samples
    weights = _window_weights(n)
    n_t = x.shape[1]
    eye = np.eye(x.shape[0])
    for w in np.flatnonzero(tripped):
        s = starts[w]
        lo, hi = max(s, 0), min(s + n, n_t)
        seg_w = weights[lo - s:hi - s]
        out[:, lo:hi] += seg_w * ((mats[w] - eye) @ x[:, lo:hi])
    if tripped.any():
        logger.debug("ASR reconstructed %d of %d windows", tripped.sum(), len(starts))
    return task.with_data(out)


# ---------------------------------------------------------------------------
# epoch amplitude gate

@dataclass
class EpochMask:
    keep: np.ndarray
    reasons: list = field(default_factory=list)

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if not self.reasons:
            self.reasons = ["" if k else "amplitude" for k in self.keep]

    def __len__(self):
        return len(self.keep)

    @property
    def kept_fraction(self) -> float:
        return float(self.keep.mean()) if len(self.keep) else 0.0

    @property
    def excluded_fraction(self) -> float:
        return float((~self.keep).mean()) if len(self.keep) else 0.0

    def to_jsonl(self, path) -> None:
        with Path(path).open("w") as fh:
            for i, (k, r) in enumerate(zip(self.keep, self.reasons)):
                fh.write(json.dumps({"epoch_index": i, "kept": bool(k), "reason": r or None}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "EpochMask":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        rows.sort(key=lambda r: r["epoch_index"])
        return cls([r["kept"] for r in rows], [r.get("reason") or "" for r in rows])

    @staticmethod
    def concatenate(masks) -> "EpochMask":
        masks = list(masks)
        if not masks:
            return EpochMask(np.zeros(0, dtype=bool), [])
        return EpochMask(np.concatenate([m.keep for m in masks]),
                         [r for m in masks for r in m.reasons])


def gate_epochs(epochs, limit: float = 100.0) -> EpochMask:
    """Keep an epoch iff every sample of every channel lies in ``[-limit, limit]``.

    Parameters
    ----------
    epochs : ndarray, shape (n_epochs, n_channels, n_times)
    """
    if not limit > 0:
        raise ValueError("limit must be positive")
    x = np.asarray(epochs, dtype=np.float64)
    if x.size == 0:
        return EpochMask(np.zeros(len(x), dtype=bool), [])
    keep = np.all(np.abs(x) <= limit, axis=(1, 2))
    return EpochMask(keep)


def participant_inclusion(mask: EpochMask, cutoff: float = 0.60) -> str:
    """``"exclude"`` when at least ``cutoff`` of the epochs were gated out."""
    if len(mask) == 0:
        raise ValueError("empty mask")
    return "exclude" if mask.excluded_fraction >= cutoff - 1e-12 else "include"
