"""Radar sequence I/O, normalization, windowing and synthetic data.

TRDM container layout (little-endian)::

    offset  size  field
    0       4     magic b"TRDM"
    4       2     format version (u16, currently 1)
    6       2     reserved (u16, zero)
    8       4     frame count N (u32)
    12      4     height H (u32)
    16      4     width W (u32)
    20      8     start time, unix seconds (u64)
    28      4     cadence, seconds (u32)
    32      ...   N*H*W float32 rain rates in mm/h, time-major, row-major
"""
from __future__ import annotations

import datetime as dt
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TRDM"
VERSION = 1
CADENCE_S = 300
HEADER = struct.Struct("<4sHHIIIQI")

CONTEXT_FRAMES = 4
TARGET_FRAMES = 16
WINDOW_FRAMES = CONTEXT_FRAMES + TARGET_FRAMES


class TRDMFormatError(ValueError):
    """Base class for container read errors."""


class BadMagicError(TRDMFormatError):
    pass


class UnsupportedVersionError(TRDMFormatError):
    pass


class TruncatedPayloadError(TRDMFormatError):
    pass


class NonFiniteValueError(TRDMFormatError):
    pass


@dataclass
class RadarSequence:
    """Stack of rain-rate rasters (mm/h) at a fixed 5-minute cadence."""

    frames: np.ndarray
    start_time: dt.datetime = field(
        default_factory=lambda: dt.datetime(2021, 1, 1, tzinfo=dt.timezone.utc)
    )
    cadence: int = CADENCE_S

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be N x H x W with N >= 1, got {self.frames.shape}")
        if self.cadence != CADENCE_S:
            raise ValueError(f"cadence is fixed at {CADENCE_S} s, got {self.cadence}")
        if self.start_time.tzinfo is None:
            self.start_time = self.start_time.replace(tzinfo=dt.timezone.utc)

    def __len__(self):
        return self.frames.shape[0]


def save_sequence(seq: RadarSequence, path) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    if not np.all(np.isfinite(frames)):
        raise NonFiniteValueError("refusing to write non-finite rain rates")
    n, h, w = frames.shape
    header = HEADER.pack(MAGIC, VERSION, 0, n, h, w, int(seq.start_time.timestamp()), seq.cadence)
    Path(path).write_bytes(header + frames.tobytes())


def load_sequence(path) -> RadarSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a TRDM container (magic {raw[:4]!r})")
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: header is {len(raw)} bytes, need {HEADER.size}")
    _, version, _, n, h, w, start, cadence = HEADER.unpack_from(raw)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version}, expected {VERSION}")
    need = n * h * w * 4
    payload = raw[HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, need {need}")
    frames = np.frombuffer(payload, dtype="<f4", count=n * h * w).reshape(n, h, w)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteValueError(f"{path}: payload contains non-finite values")
    try:
        return RadarSequence(
            frames=frames.astype(np.float32),
            start_time=dt.datetime.fromtimestamp(start, tz=dt.timezone.utc),
            cadence=cadence,
        )
    except (ValueError, OverflowError, OSError) as exc:
        # header decoded but describes an impossible sequence
        raise TRDMFormatError(f"{path}: invalid header field: {exc}") from exc


@dataclass(frozen=True)
class NormalizationSpec:
    """log1p-then-affine map from [0, max_rate] mm/h onto [-1, 1]."""

    max_rate: float = 128.0


def normalize(x, spec: NormalizationSpec = NormalizationSpec()):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("rain rates must be non-negative")
    return 2.0 * np.log1p(np.minimum(x, spec.max_rate)) / math.log1p(spec.max_rate) - 1.0


def denormalize(y, spec: NormalizationSpec = NormalizationSpec()):
    """Inverse of :func:`normalize`; inputs outside [-1, 1] are clipped."""
    y = np.clip(np.asarray(y, dtype=np.float64), -1.0, 1.0)
    return np.expm1((y + 1.0) * 0.5 * math.log1p(spec.max_rate))


def downsample_area(x, factor: int = 8):
    """Block-mean pooling over the last two axes."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"spatial shape {(h, w)} not divisible by {factor}")
    blocks = x.reshape(*x.shape[:-2], h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


@dataclass
class SequenceSample:
    """4 context + 16 target frames, normalized, each (frames, 1, H, W)."""

    context: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if self.context.shape[0] != CONTEXT_FRAMES or self.target.shape[0] != TARGET_FRAMES:
            raise ValueError("a sample has exactly 4 context and 16 target frames")


def make_windows(seq: RadarSequence, stride: int, factor: int = 1,
                 spec: NormalizationSpec = NormalizationSpec()) -> list[SequenceSample]:
    """Every contiguous 20-frame window at ``stride``, optionally area-pooled."""
    if stride < 1:
        raise ValueError("stride must be positive")
    frames = seq.frames
    samples = []
    for start in range(0, len(seq) - WINDOW_FRAMES + 1, stride):
        win = frames[start:start + WINDOW_FRAMES]
        if factor > 1:
            win = downsample_area(win, factor)
        win = normalize(win, spec).astype(np.float32)[:, None]
        samples.append(SequenceSample(win[:CONTEXT_FRAMES], win[CONTEXT_FRAMES:]))
    return samples


def collate(samples: list[SequenceSample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into (B, 4, 1, H, W) and (B, 16, 1, H, W) tensors."""
    ctx = torch.from_numpy(np.stack([s.context for s in samples]))
    tgt = torch.from_numpy(np.stack([s.target for s in samples]))
    return ctx, tgt


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the advected Gaussian-cell generator.

    Lengths are in pixels of a 256-pixel grid and scale with the
    requested size.
    """

    min_cells: int = 3
    max_cells: int = 8
    min_width: float = 10.0
    max_width: float = 32.0
    min_peak: float = 1.0
    max_peak: float = 64.0
    min_speed: float = 1.0
    max_speed: float = 4.0
    max_growth: float = 0.04


def _sequence_params(rng: np.random.Generator, cfg: SynthConfig, h: int, w: int):
    scale = min(h, w) / 256.0
    n = int(rng.integers(cfg.min_cells, cfg.max_cells + 1))
    speed = rng.uniform(cfg.min_speed, cfg.max_speed) * scale
    angle = rng.uniform(0.0, 2.0 * math.pi)
    velocity = (speed * math.sin(angle), speed * math.cos(angle))
    cells = {
        "y": rng.uniform(0, h, n),
        "x": rng.uniform(0, w, n),
        "width": rng.uniform(cfg.min_width, cfg.max_width, n) * scale,
        "peak": rng.uniform(cfg.min_peak, cfg.max_peak, n),
        "growth": rng.uniform(-cfg.max_growth, cfg.max_growth, n),
    }
    return velocity, cells


def _render(velocity, cells, frames: int, h: int, w: int, max_rate: float) -> np.ndarray:
    ys = np.arange(h, dtype=np.float64)[None, :, None]
    xs = np.arange(w, dtype=np.float64)[None, None, :]
    out = np.zeros((frames, h, w), dtype=np.float64)
    steps = np.arange(frames, dtype=np.float64)
    for cy, cx, width, peak, growth in zip(cells["y"], cells["x"], cells["width"],
                                           cells["peak"], cells["growth"]):
        # periodic domain: cells leaving one edge re-enter at the other
        py = (cy + velocity[0] * steps) % h
        px = (cx + velocity[1] * steps) % w
        dy = (ys - py[:, None, None] + h / 2) % h - h / 2
        dx = (xs - px[:, None, None] + w / 2) % w - w / 2
        amp = np.minimum(peak * np.exp(growth * steps), max_rate)[:, None, None]
        out += amp * np.exp(-(dy ** 2 + dx ** 2) / (2.0 * width ** 2))
    return np.minimum(out, max_rate)


def synth_advection_dataset(seed: int, count: int, H: int = 256, W: int = 256,
                            frames_per_seq: int = WINDOW_FRAMES,
                            config: SynthConfig = SynthConfig(),
                            start_index: int = 0) -> list[RadarSequence]:
    """Seeded sequences of 3-8 Gaussian rain cells drifting at constant velocity.

    Each cell grows or decays exponentially; the total rate is capped at
    twice ``max_peak``. Sequence ``i`` depends only on ``(seed, i)``, so
    ``start_index`` gives disjoint slices of one stream.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    return [synth_sequence(seed, i, H, W, frames_per_seq, config)
            for i in range(start_index, start_index + count)]


def synth_sequence(seed: int, index: int, H: int = 256, W: int = 256,
                   frames_per_seq: int = WINDOW_FRAMES, config: SynthConfig = SynthConfig()):
    rng = np.random.default_rng([seed, index])
    velocity, cells = _sequence_params(rng, config, H, W)
    frames = _render(velocity, cells, frames_per_seq, H, W, 2.0 * config.max_peak)
    start = dt.datetime(2021, 1, 1, tzinfo=dt.timezone.utc) + dt.timedelta(hours=2 * index)
    return RadarSequence(frames.astype(np.float32), start_time=start)


def synth_velocity(seed: int, index: int, H: int = 256, W: int = 256,
                   config: SynthConfig = SynthConfig()) -> tuple[float, float]:
    """Configured (dy, dx) per-frame drift of sequence ``index``."""
    rng = np.random.default_rng([seed, index])
    return _sequence_params(rng, config, H, W)[0]
