"""Recordings and the filtering front-end.

Two application paths share one filter design:

* ``apply_offline`` runs each contiguous segment forward and backward
  (zero phase), for batch analysis.
* ``apply_stream`` runs the same second-order sections causally, carrying
  delay registers between chunks, for online use.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)

DEFAULT_FS = 256.0
FRONTAL_CHANNELS = ("AF7", "AF8")
OPTIONAL_CHANNELS = ("TP9", "TP10")

# Impulse-response level (relative to peak) that defines the settle length.
SETTLE_LEVEL = 1e-3


class SignalError(ValueError):
    """Invalid filter parameters or malformed recording input."""


@dataclass(frozen=True)
class Recording:
    """Continuous multi-channel recording in microvolts.

    Parameters
    ----------
    sample_rate : float
        Sampling frequency in Hz.
    channels : tuple of str
        Channel names, one per row of ``data``.
    data : ndarray, shape (n_channels, n_samples)
        Amplitudes in µV.
    gaps : tuple of (int, int)
        Half-open ``[start, end)`` sample ranges with no valid data. Samples
        inside a gap are zero-filled and must never be analysed.
    start_time : float
        Time stamp of sample 0, in seconds.
    """

    sample_rate: float
    channels: tuple
    data: np.ndarray
    gaps: tuple = ()
    start_time: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise SignalError("data must be 2-D (channels x samples)")
        if data.shape[0] != len(self.channels):
            raise SignalError(
                f"{data.shape[0]} data rows for {len(self.channels)} channels")
        if not self.sample_rate > 0:
            raise SignalError("sample_rate must be positive")
        gaps = tuple((int(a), int(b)) for a, b in self.gaps)
        prev_end = 0
        for a, b in gaps:
            if not (prev_end <= a < b <= data.shape[1]):
                raise SignalError(f"gaps must be sorted, disjoint and in bounds: {gaps}")
            prev_end = b
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "gaps", gaps)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_samples) / self.sample_rate

    def segments(self) -> list[tuple[int, int]]:
        """Contiguous ``[start, end)`` runs between gaps."""
        out = []
        pos = 0
        for a, b in self.gaps:
            if a > pos:
                out.append((pos, a))
            pos = b
        if pos < self.n_samples:
            out.append((pos, self.n_samples))
        return out

    def valid_mask(self) -> np.ndarray:
        mask = np.ones(self.n_samples, dtype=bool)
        for a, b in self.gaps:
            mask[a:b] = False
        return mask

    def with_data(self, data: np.ndarray, gaps=None) -> "Recording":
        return replace(self, data=data, gaps=self.gaps if gaps is None else gaps)


@dataclass(frozen=True)
class FilterSpec:
    """A designed IIR filter as a cascade of second-order sections."""

    kind: str
    corners: tuple
    order: int
    sos: np.ndarray
    sample_rate: float

    def response(self, freqs, zero_phase: bool = True) -> np.ndarray:
        """Magnitude response at ``freqs`` (Hz).

        With ``zero_phase`` the response of the forward-backward application
        is returned, i.e. the squared single-pass magnitude.
        """
        _, h = signal.sosfreqz(self.sos, worN=np.atleast_1d(freqs), fs=self.sample_rate)
        mag = np.abs(h)
        return mag ** 2 if zero_phase else mag

    def impulse_response(self, seconds: float = 10.0) -> np.ndarray:
        n = int(round(seconds * self.sample_rate))
        impulse = np.zeros(n)
        impulse[0] = 1.0
        return signal.sosfilt(self.sos, impulse)

    @property
    def settle_length(self) -> int:
        """Samples until the impulse response stays below ``SETTLE_LEVEL`` of its peak."""
        seconds = 10.0
        while True:
            h = np.abs(self.impulse_response(seconds))
            above = np.flatnonzero(h > SETTLE_LEVEL * h.max())
            last = int(above[-1]) + 1
            if last < len(h) // 2 or seconds > 3600:
                return last
            seconds *= 4


def _check_corner(freq, fs, name):
    if not (0 < freq < fs / 2):
        raise SignalError(f"{name}={freq} Hz must lie strictly between 0 and Nyquist ({fs / 2} Hz)")


def design_bandpass(fs: float, low: float, high: float, order: int = 4) -> FilterSpec:
    """Butterworth band-pass of the given prototype order."""
    _check_corner(low, fs, "low")
    _check_corner(high, fs, "high")
    if not low < high:
        raise SignalError("low corner must be below high corner")
    if order < 1:
        raise SignalError("order must be >= 1")
    sos = signal.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")
    return FilterSpec("bandpass", (float(low), float(high)), int(order), sos, float(fs))


def design_notch(fs: float, f0: float, q: float = 30.0) -> FilterSpec:
    """Second-order IIR notch at ``f0`` with quality factor ``q``."""
    _check_corner(f0, fs, "f0")
    if not q > 0:
        raise SignalError("q must be positive")
    b, a = signal.iirnotch(f0, q, fs=fs)
    sos = signal.tf2sos(b, a)
    return FilterSpec("notch", (float(f0),), 2, sos, float(fs))


def apply_offline(rec: Recording, spec: FilterSpec) -> Recording:
    """Zero-phase filtering, independently on each contiguous segment.

    Segments shorter than three settle lengths cannot be padded sensibly;
    they are zeroed, added to the gap list and logged.
    """
    if rec.n_samples == 0:
        raise SignalError("empty recording")
    if not np.isclose(rec.sample_rate, spec.sample_rate):
        raise SignalError("filter designed for a different sample rate")
    pad = 3 * spec.settle_length
    out = np.zeros_like(rec.data)
    gaps = list(rec.gaps)
    for a, b in rec.segments():
        if b - a <= pad:
            logger.warning("segment [%d, %d) shorter than %d samples; skipped", a, b, pad + 1)
            gaps.append((a, b))
            continue
        out[:, a:b] = signal.sosfiltfilt(spec.sos, rec.data[:, a:b], axis=-1,
                                         padtype="odd", padlen=pad)
    return rec.with_data(out, gaps=_merge_intervals(gaps))


def apply_chain(rec: Recording, specs) -> Recording:
    for spec in specs:
        rec = apply_offline(rec, spec)
    return rec


@dataclass
class FilterState:
    """Delay registers for causal streaming; one instance per stream."""

    sos: np.ndarray
    zi: np.ndarray = field(repr=False)

    @classmethod
    def new(cls, spec: FilterSpec, n_channels: int) -> "FilterState":
        zi = np.zeros((spec.sos.shape[0], n_channels, 2))
        return cls(spec.sos, zi)


def apply_stream(state: FilterState, chunk) -> np.ndarray:
    """Filter one ``(n_channels, n)`` chunk causally, updating ``state``."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim == 1:
        chunk = chunk[None, :]
    if chunk.shape[-1] == 0:
        return chunk.copy()
    y, state.zi = signal.sosfilt(state.sos, chunk, axis=-1, zi=state.zi)
    return y


def _merge_intervals(intervals):
    merged = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return tuple(merged)


def segment_gaps(timestamps, samples, channels=FRONTAL_CHANNELS,
                 sample_rate: float = DEFAULT_FS, max_gap: float = 0.1) -> Recording:
    """Build a recording from time-stamped samples, marking dropouts.

    Any inter-sample interval longer than ``max_gap`` seconds becomes a gap:
    zero-valued placeholder samples are inserted to keep the time axis and the
    inserted range is annotated. Shorter irregularities are treated as jitter.

    Parameters
    ----------
    timestamps : array_like, shape (n,)
        Non-decreasing sample times in seconds.
    samples : array_like, shape (n_channels, n)
    """
    t = np.asarray(timestamps, dtype=np.float64)
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[1] != t.size:
        raise SignalError("timestamps and samples differ in length")
    if t.size and np.any(np.diff(t) < 0):
        raise SignalError("timestamps must be non-decreasing")
    if t.size == 0:
        return Recording(sample_rate, channels, x)
    dt = np.diff(t)
    holes = np.flatnonzero(dt > max_gap)
    pieces = []
    gaps = []
    pos = 0
    n_out = 0
    for h in holes:
        pieces.append(x[:, pos:h + 1])
        n_out += h + 1 - pos
        missing = max(int(round(dt[h] * sample_rate)) - 1, 1)
        pieces.append(np.zeros((x.shape[0], missing)))
        gaps.append((n_out, n_out + missing))
        n_out += missing
        pos = h + 1
    pieces.append(x[:, pos:])
    return Recording(sample_rate, channels, np.concatenate(pieces, axis=1),
                     tuple(gaps), float(t[0]))


def gap_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".gaps.json")


def read_recording_csv(path, sample_rate: float = DEFAULT_FS, max_gap: float = 0.1,
                       channels=FRONTAL_CHANNELS) -> Recording:
    """Read ``timestamp_s,AF7,AF8[,TP9,TP10]``.

    If a gap sidecar written by :func:`write_recording_csv` exists, the file
    is treated as already regularised and the sidecar gaps are restored.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh))
    header = [h.strip() for h in header]
    if not header or header[0] != "timestamp_s":
        raise SignalError(f"{path}: first column must be timestamp_s")
    missing = [c for c in channels if c not in header]
    if missing:
        raise SignalError(f"{path}: missing channel columns {missing}")
    extra = [c for c in header[1:] if c not in channels]
    if extra:
        warnings.warn(f"{path}: ignoring extra channels {extra}", stacklevel=2)
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = table[:, 0]
    x = np.stack([table[:, header.index(c)] for c in channels])
    sidecar = gap_sidecar_path(path)
    if sidecar.exists():
        spans = json.loads(sidecar.read_text())
        t0 = float(t[0]) if t.size else 0.0
        gaps = [(int(round((a - t0) * sample_rate)), int(round((b - t0) * sample_rate)))
                for a, b in spans]
        return Recording(sample_rate, channels, x, tuple(gaps), t0)
    return segment_gaps(t, x, channels, sample_rate, max_gap)


def write_recording_csv(rec: Recording, path) -> None:
    """Write samples plus a ``<stem>.gaps.json`` sidecar of ``[start_s, end_s]``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([rec.times(), rec.data.T])
    header = ",".join(("timestamp_s",) + tuple(rec.channels))
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")
    fs = rec.sample_rate
    spans = [[rec.start_time + a / fs, rec.start_time + b / fs] for a, b in rec.gaps]
    gap_sidecar_path(path).write_text(json.dumps(spans))
