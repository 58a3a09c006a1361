"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Sequences are comma
separated. Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    synth_count: int = 8
    synth_size: int = 256
    synth_frames: int = 20
    window_stride: int = 4
    max_rate: float = 128.0
    # geometry: predictor frames are hr_size / sr_factor pixels square
    hr_size: int = 256
    sr_factor: int = 8
    # diffusion
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # prediction stage
    predictor_base_channels: int = 32
    predictor_channel_mults: tuple = (1, 2, 4)
    predictor_attention: tuple = (False, False, True)
    predictor_res_blocks: int = 2
    predictor_embed_dim: int = 256
    predictor_encoder_channels: tuple = (16, 32, 64, 128)
    predictor_encoder_blocks: int = 2
    # pixel-space super-resolution
    ssr_base_channels: int = 32
    ssr_channel_mults: tuple = (1, 2, 2, 4)
    ssr_attention: tuple = (False, False, False, True)
    ssr_res_blocks: int = 2
    # autoencoder
    ae_channels: tuple = (32, 64, 128)
    ae_blocks: int = 2
    # latent super-resolution
    lsr_base_channels: int = 64
    lsr_channel_mults: tuple = (1, 2, 2)
    lsr_attention: tuple = (False, False, True)
    lsr_res_blocks: int = 2
    embed_patch: int = 8
    embed_width: int = 192
    embed_layers: int = 4
    embed_heads: int = 4
    heads: int = 4
    # training
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 2e-4
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    seed: int = 0
    # evaluation / inference
    members: int = 4
    csi_threshold: float = 0.06
    fss_threshold: float = 0.06
    fss_window: int = 9
    reconstruct: str = "ssr"
    # clamp the implied clean sample at every pixel-space reverse step
    clip_denoised: bool = False
    # denoisers output sqrt(abar) * F + sqrt(1 - abar) * x_t instead of raw F
    noise_skip: bool = True

    def __post_init__(self):
        if self.reconstruct not in ("ssr", "lsr"):
            raise ConfigError(f"reconstruct must be 'ssr' or 'lsr', got {self.reconstruct!r}")
        if self.hr_size % self.sr_factor:
            raise ConfigError("hr_size must be a multiple of sr_factor")

    @property
    def low_size(self) -> int:
        return self.hr_size // self.sr_factor

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse(default, text: str):
    if isinstance(default, tuple):
        conv = _parse_bool if default and isinstance(default[0], bool) else int
        return tuple(conv(p) for p in text.split(",") if p.strip())
    if isinstance(default, bool):
        return _parse_bool(text)
    return type(default)(text.strip())


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse(defaults[key], value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return dataclasses.replace(base, **values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
