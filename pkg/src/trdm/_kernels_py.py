"""NumPy implementations of the verification kernels.

Used when the compiled extension is unavailable or when
``TRDM_KERNELS=python`` is set.
"""
import numpy as np


def crps_pixels(members, obs):
    """Per-pixel empirical-CDF CRPS for members of shape (M, P)."""
    m = members.shape[0]
    xs = np.sort(members, axis=0)
    mae = np.abs(xs - obs[None, :]).sum(axis=0) / m
    weights = 2.0 * np.arange(m, dtype=np.float64) - m + 1.0
    spread = (weights[:, None] * xs).sum(axis=0)
    return mae - spread / (m * m)


def box_mean(field, window):
    """Centred window mean with zero padding outside the field."""
    r = window // 2
    padded = np.pad(field, r + 1)[: -1, : -1]
    sat = padded.cumsum(axis=0).cumsum(axis=1)
    h, w = field.shape
    total = (
        sat[window:window + h, window:window + w]
        - sat[:h, window:window + w]
        - sat[window:window + h, :w]
        + sat[:h, :w]
    )
    return total / (window * window)


def contingency(forecast, obs, threshold):
    """(hits, misses, false_alarms) for exceedance of ``threshold`` (>=)."""
    f = forecast >= threshold
    o = obs >= threshold
    hits = int(np.count_nonzero(f & o))
    misses = int(np.count_nonzero(o & ~f))
    false_alarms = int(np.count_nonzero(f & ~o))
    return hits, misses, false_alarms
