"""Prediction stage: 3D conditional denoiser forecasting 16 low-res frames.

The denoiser sees the 4 context frames concatenated in front of the 16
noisy target frames along the time axis (a 20-frame volume) and a
context embedding from a 3D residual encoder, added together with the
timestep embedding inside every residual block. Only the 16 target
positions of the output are returned.

Array layout at the API boundary is (frames, channels, H, W), with an
optional leading batch axis.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from trdm.diffusion import NoiseSchedule, forward_diffuse, l1_eps_loss, sample
from trdm.nn import Downsample, NoiseSkip, ResBlock, UNet, norm
from trdm.training import StepOutput, Trainer

_CL = torch.channels_last_3d

CONTEXT_FRAMES = 4
TARGET_FRAMES = 16


@dataclass(frozen=True)
class PredictorConfig:
    frame_size: int = 32
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    attention: tuple = (False, False, True)
    num_res_blocks: int = 2
    embed_dim: int = 256
    encoder_channels: tuple = (16, 32, 64, 128)
    encoder_blocks: int = 2
    heads: int = 4
    # (T, beta_start, beta_end) for the output skip; empty means plain noise output
    skip_schedule: tuple = ()

    def __post_init__(self):
        levels = len(self.channel_mults)
        if levels < 2:
            raise ValueError("the denoiser needs at least 2 resolution levels")
        if len(self.attention) != levels:
            raise ValueError("one attention flag per resolution level")
        if self.frame_size % 2 ** (levels - 1):
            raise ValueError(
                f"frame_size {self.frame_size} not divisible by 2^{levels - 1}"
            )
        if self.frame_size % 2 ** (len(self.encoder_channels) - 1):
            raise ValueError("frame_size too small for the context encoder depth")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        d = dict(d)
        for key in ("channel_mults", "attention", "encoder_channels"):
            d[key] = tuple(d[key])
        d["skip_schedule"] = tuple(d.get("skip_schedule", ()))
        return cls(**d)


class ContextEncoder(nn.Module):
    """3D residual encoder mapping (B, 1, 4, H, W) context to a vector."""

    def __init__(self, channels=(16, 32, 64, 128), blocks: int = 2, embed_dim: int = 256):
        super().__init__()
        self.stem = nn.Conv3d(1, channels[0], 3, padding=1)
        layers = []
        ch = channels[0]
        for i, out_ch in enumerate(channels):
            if i > 0:
                layers.append(Downsample(ch, dims=3))
            for _ in range(blocks):
                layers.append(ResBlock(ch, out_ch, dims=3))
                ch = out_ch
        self.stages = nn.ModuleList(layers)
        self.out_norm = norm(ch)
        self.head = nn.Linear(ch, embed_dim)

    def forward(self, x):
        h = self.stem(x)
        for layer in self.stages:
            h = layer(h)
        h = F.silu(self.out_norm(h)).mean(dim=(2, 3, 4))
        return self.head(h)


class SeqPredictor(nn.Module):
    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.encoder = ContextEncoder(config.encoder_channels, config.encoder_blocks, config.embed_dim)
        self.unet = UNet(
            in_channels=1,
            out_channels=1,
            base_channels=config.base_channels,
            channel_mults=config.channel_mults,
            attention=config.attention,
            num_res_blocks=config.num_res_blocks,
            cond_dim=config.embed_dim,
            dims=3,
            heads=config.heads,
        )
        self.skip = NoiseSkip(config.skip_schedule)
        # mkldnn's channels-last 3D convolutions are ~3x faster on CPU
        self.to(memory_format=_CL)

    def forward(self, context, x_eps, t, cond=None):
        """Predicted noise for batched (B, 16, 1, H, W) ``x_eps``."""
        ctx = context.permute(0, 2, 1, 3, 4)
        if cond is None:
            cond = self.encoder(ctx.contiguous(memory_format=_CL))
        vol = torch.cat([ctx, x_eps.permute(0, 2, 1, 3, 4)], dim=2)
        vol = vol.contiguous(memory_format=_CL)
        out = self.unet(vol, t, cond)[:, :, CONTEXT_FRAMES:]
        return self.skip(out.permute(0, 2, 1, 3, 4), x_eps, t)


def _batched(x, frames: int, size: int, name: str):
    expected = (frames, 1, size, size)
    if tuple(x.shape[-4:]) != expected or x.ndim not in (4, 5):
        raise ValueError(f"{name} must have shape {expected} (optionally batched), got {tuple(x.shape)}")
    return (x[None], True) if x.ndim == 4 else (x, False)


def encode_context(context: torch.Tensor, model: SeqPredictor) -> torch.Tensor:
    """Context embedding (``embed_dim``,) or (B, ``embed_dim``)."""
    size = model.config.frame_size
    ctx, single = _batched(torch.as_tensor(context), CONTEXT_FRAMES, size, "context")
    ctx = ctx.permute(0, 2, 1, 3, 4).to(_dtype(model)).contiguous(memory_format=_CL)
    emb = model.encoder(ctx)
    return emb[0] if single else emb


def predict_noise(context, x_eps, t, cond, model: SeqPredictor) -> torch.Tensor:
    size = model.config.frame_size
    ctx, single = _batched(torch.as_tensor(context), CONTEXT_FRAMES, size, "context")
    x, _ = _batched(torch.as_tensor(x_eps), TARGET_FRAMES, size, "x_eps")
    if x.shape[0] != ctx.shape[0]:
        raise ValueError("context and x_eps batch sizes differ")
    if cond is not None and cond.ndim == 1:
        cond = cond[None].expand(ctx.shape[0], -1)
    t = torch.as_tensor(t).reshape(-1).expand(ctx.shape[0])
    out = model(ctx, x, t, cond)
    if not torch.isfinite(out).all():
        raise FloatingPointError(
            f"non-finite denoiser output at t={t.tolist()}: "
            f"{int((~torch.isfinite(out)).sum())} bad values"
        )
    return out[0] if single else out


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def train_step(batch, trainer: Trainer, schedule: NoiseSchedule, rng: torch.Generator) -> StepOutput:
    """One update on L1[eps, eps_theta(context, t, x_eps, tau(context))].

    ``batch`` is a (context, target) pair of (B, 4, 1, H, W) and
    (B, 16, 1, H, W) tensors.
    """
    context, target = batch
    if context.shape[0] == 0:
        raise ValueError("empty batch")
    model = trainer.model
    model.skip.check(schedule)
    dtype = _dtype(model)
    context = context.to(dtype)
    target = target.to(dtype)
    b = target.shape[0]
    t = torch.randint(1, schedule.step_count + 1, (b,), generator=rng)
    eps = torch.randn(target.shape, generator=rng, dtype=dtype)
    x_eps = forward_diffuse(target, t, eps, schedule)
    model.train()
    eps_hat = model(context, x_eps, t)
    loss = l1_eps_loss(eps, eps_hat)
    value = trainer.update(loss)
    return StepOutput(value, eps, eps_hat.detach(), t)


@torch.no_grad()
def forecast(context, members: int, model: SeqPredictor, schedule: NoiseSchedule,
             rng: torch.Generator, clip_denoised: bool = False) -> torch.Tensor:
    """Ensemble forecast of shape (members, 16, 1, H, W), clamped to [-1, 1].

    ``context`` may carry a leading batch axis, giving
    (B, members, 16, 1, H, W). Members are drawn in one batched sampler
    call; each is an independent reverse-diffusion trajectory.
    ``clip_denoised`` keeps the implied clean frames inside [-1, 1] at
    every step.
    """
    if members < 1:
        raise ValueError("members must be >= 1")
    model.eval()
    model.skip.check(schedule)
    size = model.config.frame_size
    ctx, single = _batched(torch.as_tensor(context), CONTEXT_FRAMES, size, "context")
    dtype = _dtype(model)
    ctx = ctx.to(dtype)
    b = ctx.shape[0]
    cond = model.encoder(ctx.permute(0, 2, 1, 3, 4).contiguous(memory_format=_CL))
    ctx_rep = ctx.repeat_interleave(members, dim=0)
    cond_rep = cond.repeat_interleave(members, dim=0)

    def denoiser(x, t, condition):
        c, e = condition
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        return model(c, x, tt, e)

    shape = (b * members, TARGET_FRAMES, 1, size, size)
    out = sample(denoiser, (ctx_rep, cond_rep), shape, schedule, rng, dtype=dtype,
                 clip_x0=1.0 if clip_denoised else None)
    out = out.clamp(-1.0, 1.0).reshape(b, members, TARGET_FRAMES, 1, size, size)
    return out[0] if single else out
