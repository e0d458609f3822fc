"""Epoching and band-power features.

Every 1 s epoch becomes seven log band powers: a DPSS multitaper PSD per
channel, Simpson integration over each band, averaging of the two frontal
probes, then a natural log with a small floor.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.integrate import simpson
from scipy.signal.windows import dpss

from .signal_core import Recording

logger = logging.getLogger(__name__)

TASKS = ("chess", "nback", "rotation", "stroop")
LOG_FLOOR = 1e-20


@dataclass(frozen=True)
class BandScheme:
    """Ordered ``(name, low, high)`` bands.

    Membership of a frequency is half-open ``[low, high)``; the integration
    limits of a band are its closed interval.
    """

    bands: tuple

    def __post_init__(self):
        bands = tuple((str(n), float(lo), float(hi)) for n, lo, hi in self.bands)
        for name, lo, hi in bands:
            if not lo < hi:
                raise ValueError(f"band {name}: low must be below high")
        spans = sorted((lo, hi) for _, lo, hi in bands)
        for (_, h1), (l2, _) in zip(spans, spans[1:]):
            if l2 < h1:
                raise ValueError("bands must not overlap")
        object.__setattr__(self, "bands", bands)

    @property
    def names(self) -> tuple:
        return tuple(n for n, _, _ in self.bands)

    def __len__(self):
        return len(self.bands)

    def band_of(self, freq: float):
        for name, lo, hi in self.bands:
            if lo <= freq < hi:
                return name
        return None

    @classmethod
    def from_mapping(cls, mapping) -> "BandScheme":
        """From ``{name: [lo, hi]}`` or an ordered list of ``[name, lo, hi]``."""
        if isinstance(mapping, dict):
            return cls(tuple((k, v[0], v[1]) for k, v in mapping.items()))
        return cls(tuple((str(n), lo, hi) for n, lo, hi in mapping))


DEFAULT_BANDS = BandScheme((
    ("theta", 4, 8),
    ("alpha1", 8, 11),
    ("alpha2", 11, 14),
    ("beta1", 14, 25),
    ("beta2", 25, 35),
    ("gamma1", 35, 40),
    ("gamma2", 40, 45),
))

FEATURE_COLUMNS = ("participant", "task", "block", "workload", "epoch_start_s") + DEFAULT_BANDS.names


@dataclass(frozen=True)
class EpochLabel:
    participant: str
    task: str
    block: int
    workload: int


@dataclass(frozen=True)
class Epoch:
    data: np.ndarray  # (n_channels, n_samples) µV
    label: EpochLabel
    start: float


def epoch_stream(rec: Recording, intervals, length: float = 1.0) -> list[Epoch]:
    """Cut consecutive windows on a grid anchored at the recording start.

    Parameters
    ----------
    rec : Recording
    intervals : iterable of (start_s, end_s, EpochLabel)
        Labelled condition spans in the recording's time base.
    length : float
        Window length in seconds.

    A window is kept only when it lies entirely inside one labelled interval
    and touches no gap; its label is that interval's.
    """
    intervals = sorted(intervals, key=lambda iv: iv[0])
    if not intervals:
        warnings.warn("no labelled intervals; no epochs produced", stacklevel=2)
        return []
    fs = rec.sample_rate
    n = int(round(length * fs))
    valid = rec.valid_mask()
    bad_cum = np.concatenate([[0], np.cumsum(~valid)])
    eps = 1e-9
    epochs = []
    for k in range(rec.n_samples // n):
        i0 = k * n
        t0 = rec.start_time + i0 / fs
        t1 = t0 + length
        label = None
        for a, b, lab in intervals:
            if a - eps <= t0 and t1 <= b + eps:
                label = lab
                break
            if a > t0:
                break
        if label is None:
            continue
        if bad_cum[i0 + n] - bad_cum[i0]:
            continue
        epochs.append(Epoch(rec.data[:, i0:i0 + n], label, t0))
    return epochs


def dpss_tapers(n: int, nw: float = 2.5, n_tapers: int = 4) -> np.ndarray:
    tapers = dpss(n, nw, n_tapers)
    return tapers / np.linalg.norm(tapers, axis=-1, keepdims=True)


def multitaper_psd(x, fs: float, nw: float = 2.5, n_tapers: int = 4):
    """One-sided multitaper power spectral density.

    Eigenspectra from unit-energy DPSS tapers are averaged with equal weights.
    The series is mean-removed first.

    Parameters
    ----------
    x : array_like, shape (..., n)
        Samples in µV; leading axes are independent series.

    Returns
    -------
    freqs : ndarray, shape (n // 2 + 1,)
    psd : ndarray, shape (..., n // 2 + 1)
        Density in µV²/Hz; ``sum(psd) * df`` approximates the variance.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite samples")
    n = x.shape[-1]
    tapers = dpss_tapers(n, nw, n_tapers)
    x = x - x.mean(axis=-1, keepdims=True)
    spec = np.fft.rfft(tapers * x[..., None, :], axis=-1)
    psd = np.mean(np.abs(spec) ** 2, axis=-2) / fs
    psd[..., 1:] *= 2.0
    if n % 2 == 0:
        psd[..., -1] /= 2.0
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    return freqs, psd


def band_power(freqs, psd, scheme: BandScheme = DEFAULT_BANDS) -> np.ndarray:
    """Simpson integral of the density over each band's closed interval.

    Returns an array with the band axis appended in place of the frequency axis.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    psd = np.asarray(psd, dtype=np.float64)
    out = []
    for name, lo, hi in scheme.bands:
        sel = (freqs >= lo - 1e-9) & (freqs <= hi + 1e-9)
        if lo < freqs[0] - 1e-9 or hi > freqs[-1] + 1e-9 or sel.sum() < 2:
            raise ValueError(f"band {name} [{lo}, {hi}] not covered by the frequency grid")
        out.append(simpson(psd[..., sel], x=freqs[sel], axis=-1))
    return np.maximum(np.stack(out, axis=-1), 0.0)


def fuse_probes_and_log(p_left, p_right, floor: float = LOG_FLOOR) -> np.ndarray:
    """Natural log of the mean of two probes' band powers, floored at ``floor``."""
    a = np.asarray(p_left, dtype=np.float64)
    b = np.asarray(p_right, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("probe vectors differ in shape")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("band power must be non-negative")
    return np.log(np.maximum((a + b) / 2.0, floor))


def epoch_log_powers(data, fs: float, scheme: BandScheme = DEFAULT_BANDS, nw: float = 2.5,
                     n_tapers: int = 4, floor: float = LOG_FLOOR, fuse: str = "band") -> np.ndarray:
    """Log band powers for a stack of two-channel epochs.

    Parameters
    ----------
    data : ndarray, shape (n_epochs, 2, n_samples)
    fuse : {"band", "bin"}
        Average the probes after band integration (default) or per
        frequency bin before it.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.shape[1] != 2:
        raise ValueError("expected two channels per epoch")
    freqs, psd = multitaper_psd(data, fs, nw, n_tapers)
    if fuse == "band":
        powers = band_power(freqs, psd, scheme)
        return fuse_probes_and_log(powers[:, 0], powers[:, 1], floor)
    if fuse == "bin":
        powers = band_power(freqs, psd.mean(axis=1), scheme)
        return np.log(np.maximum(powers, floor))
    raise ValueError(f"unknown fuse mode {fuse!r}")


def features_frame(epochs, fs: float, scheme: BandScheme = DEFAULT_BANDS, **kw) -> pd.DataFrame:
    """Feature rows in the documented CSV column order."""
    columns = list(FEATURE_COLUMNS[:5]) + list(scheme.names)
    if not epochs:
        return pd.DataFrame(columns=columns)
    logp = epoch_log_powers(np.stack([e.data for e in epochs]), fs, scheme, **kw)
    meta = pd.DataFrame({
        "participant": [e.label.participant for e in epochs],
        "task": [e.label.task for e in epochs],
        "block": [e.label.block for e in epochs],
        "workload": [e.label.workload for e in epochs],
        "epoch_start_s": [e.start for e in epochs],
    })
    return pd.concat([meta, pd.DataFrame(logp, columns=list(scheme.names))], axis=1)[columns]


def read_features_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"participant": str, "task": str}, float_precision="round_trip")
    missing = [c for c in FEATURE_COLUMNS[:5] if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    return df


def write_features_csv(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, float_format="%.17g")
