from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FS = 256.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sinusoid(freq, seconds, fs=FS, amp=1.0, phase=0.0):
    t = np.arange(int(round(seconds * fs))) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


def fit_amplitude(x, freq, fs=FS):
    """Least-squares amplitude of a sinusoid at ``freq`` in ``x``."""
    t = np.arange(len(x)) / fs
    basis = np.column_stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)])
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    return float(np.hypot(*coef))


def sos_gain(sos, freq, fs=FS):
    """|H(e^jw)| of a section cascade by direct polynomial evaluation."""
    z1 = np.exp(-1j * 2 * np.pi * freq / fs)
    h = 1.0 + 0j
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * z1 + b2 * z1 ** 2) / (a0 + a1 * z1 + a2 * z1 ** 2)
    return abs(h)
