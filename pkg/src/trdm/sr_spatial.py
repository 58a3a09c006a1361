"""Pixel-space diffusion super-resolution (SSR).

The low-resolution frame is bilinearly upscaled to the target size and
concatenated with the noisy high-resolution image along channels; a 2D
UNet without temporal attention predicts the noise. Frames are
super-resolved independently.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from trdm.diffusion import NoiseSchedule, forward_diffuse, l1_eps_loss, sample
from trdm.nn import NoiseSkip, UNet
from trdm.training import StepOutput, Trainer


@dataclass(frozen=True)
class SRConfig:
    image_size: int = 256
    factor: int = 8
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 2, 4)
    attention: tuple = (False, False, False, True)
    num_res_blocks: int = 2
    heads: int = 4
    # (T, beta_start, beta_end) for the output skip; empty means plain noise output
    skip_schedule: tuple = ()

    def __post_init__(self):
        if self.image_size % self.factor:
            raise ValueError("image_size must be a multiple of factor")
        if len(self.attention) != len(self.channel_mults):
            raise ValueError("one attention flag per resolution level")
        if self.image_size % 2 ** (len(self.channel_mults) - 1):
            raise ValueError("image_size not divisible by the UNet depth")

    @property
    def low_size(self) -> int:
        return self.image_size // self.factor

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SRConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        d["attention"] = tuple(d["attention"])
        d["skip_schedule"] = tuple(d.get("skip_schedule", ()))
        return cls(**d)


def upscale_bilinear(low, H: int, W: int):
    """Bilinear resize of the last two axes with half-pixel sample centres.

    Source coordinate of output pixel ``i`` is ``(i + 0.5) * h / H - 0.5``,
    clamped to the valid range at the borders.
    """
    is_np = isinstance(low, np.ndarray)
    x = torch.from_numpy(low) if is_np else low
    h, w = x.shape[-2:]
    if H < 1 or W < 1 or H % h or W % w:
        raise ValueError(f"target size {(H, W)} must be a positive multiple of {(h, w)}")
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, h, w)
    out = F.interpolate(flat, size=(H, W), mode="bilinear", align_corners=False)
    out = out.reshape(*lead, H, W)
    return out.numpy() if is_np else out


class SSRModel(nn.Module):
    def __init__(self, config: SRConfig):
        super().__init__()
        self.config = config
        self.unet = UNet(
            in_channels=2,
            out_channels=1,
            base_channels=config.base_channels,
            channel_mults=config.channel_mults,
            attention=config.attention,
            num_res_blocks=config.num_res_blocks,
            dims=2,
            heads=config.heads,
        )
        self.skip = NoiseSkip(config.skip_schedule)

    def forward(self, low_up, x_eps, t):
        return self.skip(self.unet(torch.cat([x_eps, low_up], dim=1), t), x_eps, t)


def _check(x, shape, name):
    if tuple(x.shape[-3:]) != shape or x.ndim not in (3, 4):
        raise ValueError(f"{name} must have shape {shape} (optionally batched), got {tuple(x.shape)}")
    return (x[None], True) if x.ndim == 3 else (x, False)


def predict_noise_ssr(low_up, x_eps, t, model: SSRModel) -> torch.Tensor:
    size = model.config.image_size
    up, single = _check(torch.as_tensor(low_up), (1, size, size), "low_up")
    x, _ = _check(torch.as_tensor(x_eps), (1, size, size), "x_eps")
    t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
    out = model(up, x, t)
    return out[0] if single else out


def train_step_ssr(batch, trainer: Trainer, schedule: NoiseSchedule,
                   rng: torch.Generator) -> StepOutput:
    """One update on L1[eps, eps_ssr(x_low, t, x_eps)].

    ``batch`` is (low (B, 1, h, w), high (B, 1, H, W)).
    """
    low, high = batch
    if high.shape[0] == 0:
        raise ValueError("empty batch")
    model = trainer.model
    model.skip.check(schedule)
    dtype = next(model.parameters()).dtype
    low, high = low.to(dtype), high.to(dtype)
    size = model.config.image_size
    up = upscale_bilinear(low, size, size)
    b = high.shape[0]
    t = torch.randint(1, schedule.step_count + 1, (b,), generator=rng)
    eps = torch.randn(high.shape, generator=rng, dtype=dtype)
    x_eps = forward_diffuse(high, t, eps, schedule)
    model.train()
    eps_hat = model(up, x_eps, t)
    loss = l1_eps_loss(eps, eps_hat)
    value = trainer.update(loss)
    return StepOutput(value, eps, eps_hat.detach(), t)


@torch.no_grad()
def super_resolve(low, model: SSRModel, schedule: NoiseSchedule,
                  rng: torch.Generator, clip_denoised: bool = False) -> torch.Tensor:
    """Sample (1, H, W) high-res frames for (1, h, w) or (B, 1, h, w) inputs."""
    model.eval()
    model.skip.check(schedule)
    cfg = model.config
    low_t, single = _check(torch.as_tensor(low), (1, cfg.low_size, cfg.low_size), "low")
    dtype = next(model.parameters()).dtype
    up = upscale_bilinear(low_t.to(dtype), cfg.image_size, cfg.image_size)

    def denoiser(x, t, cond):
        return model(cond, x, torch.full((x.shape[0],), t, dtype=torch.long))

    clip = 1.0 if clip_denoised else None
    out = sample(denoiser, up, tuple(up.shape), schedule, rng, dtype=dtype, clip_x0=clip).clamp(-1.0, 1.0)
    return out[0] if single else out
