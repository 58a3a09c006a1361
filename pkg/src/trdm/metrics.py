"""Forecast verification: ensemble CRPS, FSS, CSI and normalized MSE.

Scores are tabulated at lead times 5, 20, 40, 60 and 80 minutes, i.e.
forecast frames 1, 4, 8, 12 and 16 at 5-minute cadence.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from trdm import kernels

LEAD_FRAMES = {1: 5, 4: 20, 8: 40, 12: 60, 16: 80}
COLUMNS = ("crps", "fss", "csi", "mse_norm")


@dataclass(frozen=True)
class VerifyConfig:
    csi_threshold: float = 0.06
    fss_threshold: float = 0.06
    fss_window: int = 9
    max_rate: float = 128.0

    def __post_init__(self):
        if self.csi_threshold <= 0 or self.fss_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.fss_window < 1 or self.fss_window % 2 == 0:
            raise ValueError("fss_window must be odd and >= 1")
        if self.max_rate <= 0:
            raise ValueError("max_rate must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "VerifyConfig":
        """``swedish`` (0.06 mm/h) or ``mrms`` (1 mm/h) thresholds."""
        thresholds = {"swedish": 0.06, "mrms": 1.0}
        thr = thresholds[name]
        return cls(**{"csi_threshold": thr, "fss_threshold": thr, **overrides})


def _f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def crps_ensemble(members, obs) -> float:
    """Pixel-averaged CRPS of the ensemble's empirical CDF.

    Per pixel: mean |x_i - y| - sum_ij |x_i - x_j| / (2 M^2).
    """
    members = _f64(members)
    obs = _f64(obs)
    if members.ndim != obs.ndim + 1:
        raise ValueError("members must carry one leading member axis over obs")
    if members.shape[0] < 1:
        raise ValueError("need at least one member")
    if members.shape[1:] != obs.shape:
        raise ValueError(f"member shape {members.shape[1:]} != obs shape {obs.shape}")
    per_pixel = kernels.crps_pixels(members.reshape(members.shape[0], -1), obs.reshape(-1))
    return float(np.mean(per_pixel))


def fractions(field, threshold: float, window: int) -> np.ndarray:
    """Neighbourhood exceedance fractions (window mean, zero padded)."""
    binary = (_f64(field) >= threshold).astype(np.float64)
    return np.asarray(kernels.box_mean(binary, int(window)))


def fss(forecast, obs, threshold: float, window: int) -> float:
    """Fractions skill score; 1 when neither field exceeds the threshold."""
    forecast = _f64(forecast)
    obs = _f64(obs)
    if forecast.shape != obs.shape or forecast.ndim != 2:
        raise ValueError("fss needs two 2-D fields of equal shape")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    if window > min(forecast.shape):
        raise ValueError(f"window {window} exceeds field size {forecast.shape}")
    pf = fractions(forecast, threshold, window)
    po = fractions(obs, threshold, window)
    denom = float(np.sum(pf * pf) + np.sum(po * po))
    if denom == 0.0:
        return 1.0
    return 1.0 - float(np.sum((pf - po) ** 2)) / denom


def contingency(forecast, obs, threshold: float) -> tuple[int, int, int]:
    forecast = _f64(forecast)
    obs = _f64(obs)
    if forecast.shape != obs.shape:
        raise ValueError("shape mismatch")
    return kernels.contingency(forecast.reshape(-1), obs.reshape(-1), float(threshold))


def csi(forecast, obs, threshold: float) -> float:
    """hits / (hits + misses + false alarms); 1 when all counts are zero."""
    hits, misses, false_alarms = contingency(forecast, obs, threshold)
    total = hits + misses + false_alarms
    return 1.0 if total == 0 else hits / total


def mse_norm(forecast, obs, max_rate: float = 128.0) -> float:
    """MSE after scaling both fields by ``max_rate`` and clipping to [0, 1]."""
    if max_rate <= 0:
        raise ValueError("max_rate must be positive")
    f = np.clip(_f64(forecast) / max_rate, 0.0, 1.0)
    o = np.clip(_f64(obs) / max_rate, 0.0, 1.0)
    if f.shape != o.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((f - o) ** 2))


def ensemble_mean(members) -> np.ndarray:
    # sorting first makes the mean independent of member order, bit for bit
    return np.sort(_f64(members), axis=0).mean(axis=0)


@dataclass
class MetricTable:
    """Per-lead-time scores; ``rows`` maps lead minutes to column values."""

    rows: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("lead_min",) + COLUMNS)
        for lead in sorted(self.rows):
            writer.writerow([lead] + [f"{self.rows[lead][c]:.6f}" for c in COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MetricTable":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != ("lead_min",) + COLUMNS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        rows = {int(r["lead_min"]): {c: float(r[c]) for c in COLUMNS} for r in reader}
        return cls(rows)

    def column(self, name: str) -> list[float]:
        return [self.rows[lead][name] for lead in sorted(self.rows)]


def lead_time_table(ensemble, obs, config: VerifyConfig = VerifyConfig()) -> MetricTable:
    """Score an (M, 16, H, W) ensemble against (16, H, W) observations."""
    ensemble = _f64(ensemble)
    obs = _f64(obs)
    if ensemble.ndim != 4 or obs.ndim != 3:
        raise ValueError("expected ensemble (M, 16, H, W) and obs (16, H, W)")
    if ensemble.shape[1] != 16 or obs.shape[0] != 16:
        raise ValueError(f"need 16 forecast frames, got {ensemble.shape[1]} and {obs.shape[0]}")
    if ensemble.shape[1:] != obs.shape:
        raise ValueError("ensemble and obs frame shapes differ")
    rows = {}
    for frame, lead in LEAD_FRAMES.items():
        members = ensemble[:, frame - 1]
        truth = obs[frame - 1]
        mean = ensemble_mean(members)
        rows[lead] = {
            "crps": crps_ensemble(members, truth),
            "fss": fss(mean, truth, config.fss_threshold, config.fss_window),
            "csi": csi(mean, truth, config.csi_threshold),
            "mse_norm": mse_norm(mean, truth, config.max_rate),
        }
    return MetricTable(rows)


def persistence_forecast(context) -> np.ndarray:
    """Repeat the last of the 4 context frames 16 times."""
    context = np.asarray(context)
    if context.ndim != 3 or context.shape[0] != 4:
        raise ValueError(f"context must be (4, H, W), got {context.shape}")
    return np.repeat(context[-1:], 16, axis=0)
