"""Latent-space diffusion super-resolution (LSR).

An autoencoder (E, D) compresses 1 x S x S images by 8x per side into a
4-channel latent. A conditional diffusion model then samples the latent
of the high-res image given

* ``x_emb``: pooled features of the low-res frame from a small patch
  transformer,
* ``x_latent``: E applied to the bilinearly upscaled low-res frame,
* ``x_low``: the low-res frame itself, through a learned 1x1 projection,

and D maps the sample back to pixels. Latents are standardized with
per-channel statistics of the training set before diffusion.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from trdm.diffusion import NoiseSchedule, forward_diffuse, l1_eps_loss, sample
from trdm.nn import Downsample, NoiseSkip, ResBlock, UNet, Upsample, norm
from trdm.sr_spatial import upscale_bilinear
from trdm.training import StepOutput, Trainer

LATENT_CHANNELS = 4


@dataclass(frozen=True)
class AEConfig:
    image_size: int = 256
    channels: tuple = (32, 64, 128)
    blocks: int = 2

    def __post_init__(self):
        if self.image_size % 2 ** len(self.channels):
            raise ValueError("image_size not divisible by the encoder depth")

    @property
    def latent_size(self) -> int:
        return self.image_size // 2 ** len(self.channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class Encoder(nn.Module):
    def __init__(self, config: AEConfig):
        super().__init__()
        chs = config.channels
        self.conv_in = nn.Conv2d(1, chs[0], 3, padding=1)
        layers = []
        ch = chs[0]
        for out_ch in chs:
            for _ in range(config.blocks):
                layers.append(ResBlock(ch, out_ch))
                ch = out_ch
            layers.append(Downsample(ch))
        layers.append(ResBlock(ch, ch))
        self.layers = nn.ModuleList(layers)
        self.out_norm = norm(ch)
        self.conv_out = nn.Conv2d(ch, LATENT_CHANNELS, 3, padding=1)

    def forward(self, x):
        h = self.conv_in(x)
        for layer in self.layers:
            h = layer(h)
        return self.conv_out(F.silu(self.out_norm(h)))


class Decoder(nn.Module):
    def __init__(self, config: AEConfig):
        super().__init__()
        chs = config.channels
        ch = chs[-1]
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, ch, 3, padding=1)
        layers = [ResBlock(ch, ch)]
        for out_ch in reversed(chs):
            layers.append(Upsample(ch))
            for _ in range(config.blocks):
                layers.append(ResBlock(ch, out_ch))
                ch = out_ch
        self.layers = nn.ModuleList(layers)
        self.out_norm = norm(ch)
        self.conv_out = nn.Conv2d(ch, 1, 3, padding=1)

    def forward(self, z):
        h = self.conv_in(z)
        for layer in self.layers:
            h = layer(h)
        return torch.tanh(self.conv_out(F.silu(self.out_norm(h))))


class Autoencoder(nn.Module):
    def __init__(self, config: AEConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def _batched(x, shape, name):
    x = torch.as_tensor(x)
    if tuple(x.shape[-3:]) != tuple(shape) or x.ndim not in (3, 4):
        raise ValueError(f"{name} must have shape {tuple(shape)} (optionally batched), got {tuple(x.shape)}")
    return (x[None], True) if x.ndim == 3 else (x, False)


def _dtype(model):
    return next(model.parameters()).dtype


def encode(x, ae: Autoencoder) -> torch.Tensor:
    s = ae.config.image_size
    xb, single = _batched(x, (1, s, s), "image")
    z = ae.encoder(xb.to(_dtype(ae)))
    return z[0] if single else z


def decode(z, ae: Autoencoder) -> torch.Tensor:
    n = ae.config.latent_size
    zb, single = _batched(z, (LATENT_CHANNELS, n, n), "latent")
    x = ae.decoder(zb.to(_dtype(ae)))
    return x[0] if single else x


@dataclass
class ReconOutput:
    loss: float
    x: torch.Tensor
    recon: torch.Tensor


def train_autoencoder(batch, trainer: Trainer, rng: torch.Generator | None = None) -> ReconOutput:
    """One update on the mean |D(E(x)) - x| reconstruction loss.

    ``rng`` is accepted for interface symmetry; the step is deterministic.
    """
    x = batch
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    ae = trainer.model
    x = x.to(_dtype(ae))
    ae.train()
    recon = ae(x)
    loss = (recon - x).abs().mean()
    value = trainer.update(loss)
    return ReconOutput(value, x, recon.detach())


@dataclass(frozen=True)
class EmbedConfig:
    image_size: int = 32
    patch: int = 8
    width: int = 192
    layers: int = 4
    heads: int = 4
    positional: bool = True

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2


class PatchEmbedder(nn.Module):
    """Small vision transformer returning the mean of its output tokens."""

    def __init__(self, config: EmbedConfig):
        super().__init__()
        self.config = config
        self.patchify = nn.Conv2d(1, config.width, config.patch, stride=config.patch)
        self.pos = nn.Parameter(torch.randn(1, config.tokens, config.width) * 0.02) if config.positional else None
        layer = nn.TransformerEncoderLayer(
            config.width, config.heads, dim_feedforward=4 * config.width,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.out_norm = nn.LayerNorm(config.width)

    def forward(self, x):
        tokens = self.patchify(x).flatten(2).transpose(1, 2)
        if self.pos is not None:
            tokens = tokens + self.pos
        return self.out_norm(self.blocks(tokens)).mean(dim=1)


def embed_image(low, embedder: PatchEmbedder) -> torch.Tensor:
    s = embedder.config.image_size
    xb, single = _batched(low, (1, s, s), "low")
    emb = embedder(xb.to(_dtype(embedder)))
    return emb[0] if single else emb


def encode_lowres_latent(low, ae: Autoencoder) -> torch.Tensor:
    """E applied to the bilinearly upscaled low-res frame."""
    s = ae.config.image_size
    n = ae.config.latent_size
    xb, single = _batched(low, (1, n, n), "low")
    z = ae.encoder(upscale_bilinear(xb.to(_dtype(ae)), s, s))
    return z[0] if single else z


@dataclass(frozen=True)
class LSRConfig:
    ae: AEConfig = field(default_factory=AEConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 2)
    attention: tuple = (False, False, True)
    num_res_blocks: int = 2
    heads: int = 4
    # (T, beta_start, beta_end) for the output skip; empty means plain noise output
    skip_schedule: tuple = ()

    def __post_init__(self):
        if self.embed.image_size != self.ae.latent_size:
            raise ValueError("low-res size must equal the latent size (8x pooling)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LSRConfig":
        d = dict(d)
        d["ae"] = AEConfig.from_dict(d["ae"])
        d["embed"] = EmbedConfig(**d["embed"])
        d["channel_mults"] = tuple(d["channel_mults"])
        d["attention"] = tuple(d["attention"])
        d["skip_schedule"] = tuple(d.get("skip_schedule", ()))
        return cls(**d)


class LSRModel(nn.Module):
    """E, D, embedder, latent denoiser and latent statistics in one module."""

    def __init__(self, config: LSRConfig, autoencoder: Autoencoder | None = None):
        super().__init__()
        self.config = config
        self.autoencoder = autoencoder if autoencoder is not None else Autoencoder(config.ae)
        for p in self.autoencoder.parameters():
            p.requires_grad_(False)
        self.embedder = PatchEmbedder(config.embed)
        self.low_proj = nn.Conv2d(1, 1, 1)
        self.denoiser = UNet(
            in_channels=2 * LATENT_CHANNELS + 1,
            out_channels=LATENT_CHANNELS,
            base_channels=config.base_channels,
            channel_mults=config.channel_mults,
            attention=config.attention,
            num_res_blocks=config.num_res_blocks,
            cond_dim=config.embed.width,
            dims=2,
            heads=config.heads,
        )
        self.skip = NoiseSkip(config.skip_schedule)
        self.register_buffer("latent_mean", torch.zeros(LATENT_CHANNELS))
        self.register_buffer("latent_std", torch.ones(LATENT_CHANNELS))

    def trainable_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("autoencoder.")]

    def standardize(self, z):
        return (z - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def unstandardize(self, z):
        return z * self.latent_std[:, None, None] + self.latent_mean[:, None, None]

    def forward(self, x_emb, t, x_latent, low, z_eps):
        h = torch.cat([z_eps, x_latent, self.low_proj(low)], dim=1)
        return self.skip(self.denoiser(h, t, x_emb), z_eps, t)

    @torch.no_grad()
    def conditions(self, low):
        """Frozen-E conditioning latent for batched (B, 1, n, n) ``low``.

        The embedder is trainable, so ``x_emb`` is computed separately.
        """
        s = self.config.ae.image_size
        return self.standardize(self.autoencoder.encoder(upscale_bilinear(low, s, s)))


@torch.no_grad()
def fit_latent_stats(model: LSRModel, highs: torch.Tensor, batch_size: int = 16):
    """Set per-channel latent mean/std from encodings of training images."""
    enc = model.autoencoder.encoder
    dtype = _dtype(model)
    zs = torch.cat([enc(highs[i:i + batch_size].to(dtype)) for i in range(0, len(highs), batch_size)])
    mean = zs.mean(dim=(0, 2, 3))
    std = zs.std(dim=(0, 2, 3)).clamp_min(1e-6)
    model.latent_mean.copy_(mean)
    model.latent_std.copy_(std)


def predict_noise_lsr(x_emb, t, x_latent, low, z_eps, model: LSRModel) -> torch.Tensor:
    n = model.config.ae.latent_size
    zb, single = _batched(z_eps, (LATENT_CHANNELS, n, n), "z_eps")
    xl, _ = _batched(x_latent, (LATENT_CHANNELS, n, n), "x_latent")
    lb, _ = _batched(low, (1, n, n), "low")
    emb = torch.as_tensor(x_emb)
    if emb.shape[-1] != model.config.embed.width:
        raise ValueError(f"x_emb must have length {model.config.embed.width}")
    emb = emb.reshape(-1, emb.shape[-1]).expand(zb.shape[0], -1)
    t = torch.as_tensor(t).reshape(-1).expand(zb.shape[0])
    out = model(emb, t, xl, lb, zb)
    return out[0] if single else out


def train_step_lsr(batch, trainer: Trainer, schedule: NoiseSchedule,
                   rng: torch.Generator) -> StepOutput:
    """One update on L1[eps, eps_lsr(x_emb, t, x_latent, x_low, x_eps)].

    x_eps corrupts the standardized latent E(high); E and D stay frozen.
    """
    low, high = batch
    if high.shape[0] == 0:
        raise ValueError("empty batch")
    model = trainer.model
    model.skip.check(schedule)
    dtype = _dtype(model)
    low, high = low.to(dtype), high.to(dtype)
    with torch.no_grad():
        z0 = model.standardize(model.autoencoder.encoder(high))
        x_latent = model.conditions(low)
    b = high.shape[0]
    t = torch.randint(1, schedule.step_count + 1, (b,), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=dtype)
    z_eps = forward_diffuse(z0, t, eps, schedule)
    model.train()
    model.autoencoder.eval()
    x_emb = model.embedder(low)
    eps_hat = model(x_emb, t, x_latent, low, z_eps)
    loss = l1_eps_loss(eps, eps_hat)
    value = trainer.update(loss)
    return StepOutput(value, eps, eps_hat.detach(), t)


@torch.no_grad()
def super_resolve_latent(low, model: LSRModel, schedule: NoiseSchedule,
                         rng: torch.Generator) -> torch.Tensor:
    """Sample a latent conditioned on ``low`` and decode it to (1, S, S)."""
    model.eval()
    model.skip.check(schedule)
    n = model.config.ae.latent_size
    lb, single = _batched(low, (1, n, n), "low")
    lb = lb.to(_dtype(model))
    x_emb = model.embedder(lb)
    x_latent = model.conditions(lb)

    def denoiser(z, t, cond):
        return model(x_emb, torch.full((z.shape[0],), t, dtype=torch.long), x_latent, lb, z)

    z = sample(denoiser, None, (lb.shape[0], LATENT_CHANNELS, n, n), schedule, rng, dtype=lb.dtype)
    out = model.autoencoder.decoder(model.unstandardize(z)).clamp(-1.0, 1.0)
    return out[0] if single else out


def compression_ratio(config: AEConfig) -> float:
    return config.image_size ** 2 / (LATENT_CHANNELS * config.latent_size ** 2)

