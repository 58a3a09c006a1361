"""Network building blocks shared by the 3D and 2D denoisers."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from trdm.diffusion import NoiseSchedule, make_linear_schedule, timestep_embedding


def norm(channels: int) -> nn.GroupNorm:
    groups = math.gcd(channels, 8)
    return nn.GroupNorm(groups, channels)


def _conv(dims: int):
    return nn.Conv3d if dims == 3 else nn.Conv2d


class NoiseSkip(nn.Module):
    """Noise estimate sqrt(abar_t) * F + sqrt(1 - abar_t) * x_t from a network output F.

    Near t = T the estimate tends to x_t by construction, so the network only
    supplies the signal part and the implied clean sample,
    sqrt(abar_t) * x_t - sqrt(1 - abar_t) * F, never divides by sqrt(abar_t).
    ``schedule`` is (T, beta_start, beta_end) of a linear schedule; an empty
    tuple passes F through unchanged.
    """

    def __init__(self, schedule: tuple = ()):
        super().__init__()
        self.schedule = tuple(schedule)
        abar = make_linear_schedule(*self.schedule).alpha_bars if self.schedule else []
        self.register_buffer("alpha_bars", torch.tensor(abar, dtype=torch.float32), persistent=False)

    @property
    def enabled(self) -> bool:
        return bool(self.schedule)

    def check(self, schedule: NoiseSchedule) -> None:
        """Refuse a sampling or training schedule the skip was not built for."""
        if not self.enabled:
            return
        ours = self.alpha_bars.double().numpy()
        if len(ours) != schedule.step_count or not np.allclose(ours, schedule.alpha_bars, rtol=1e-5, atol=0):
            raise ValueError(f"model output skip was built for schedule {self.schedule}, "
                             f"got one with T={schedule.step_count}")

    def forward(self, out, x_t, t):
        if not self.enabled:
            return out
        abar = self.alpha_bars.to(out.dtype)[t.reshape(-1) - 1].reshape(-1, *[1] * (out.ndim - 1))
        return abar.sqrt() * out + (1.0 - abar).sqrt() * x_t


class TimestepMLP(nn.Module):
    """Sinusoidal timestep features followed by a two-layer MLP."""

    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.net = nn.Sequential(
            nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.net[0].weight.dtype
        return self.net(timestep_embedding(t, self.base_dim).to(dtype))


class ResBlock(nn.Module):
    """Pre-norm residual block; ``emb`` is added after the first convolution.

    ``dims`` selects 2D or 3D convolutions. With ``emb_dim=0`` the block
    takes no embedding (used by the context encoder and the autoencoder).
    """

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int = 0, dims: int = 2):
        super().__init__()
        conv = _conv(dims)
        self.norm1 = norm(in_ch)
        self.conv1 = conv(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = norm(out_ch)
        self.conv2 = conv(out_ch, out_ch, 3, padding=1)
        self.skip = conv(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.dims = dims

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(F.silu(emb)).reshape(emb.shape[0], -1, *([1] * self.dims))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TokenAttention(nn.Module):
    """Multi-head self-attention over a (batch, tokens, channels) sequence."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            heads = 1
        self.heads = heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x):
        b, n, c = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        # fused kernel never materializes the (n, n) weight matrix
        out = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class TemporalAttention(nn.Module):
    """Self-attention along the time axis of a (B, C, T, H, W) volume.

    Each spatial location attends over its own time series.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.norm = norm(channels)
        self.attn = TokenAttention(channels, heads)

    def forward(self, x, emb=None):
        b, c, t, h, w = x.shape
        seq = self.norm(x).permute(0, 3, 4, 2, 1).reshape(b * h * w, t, c)
        out = self.attn(seq).reshape(b, h, w, t, c).permute(0, 4, 3, 1, 2)
        return x + out


class SpatialAttention(nn.Module):
    """Self-attention over all pixels of a (B, C, H, W) map."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.norm = norm(channels)
        self.attn = TokenAttention(channels, heads)

    def forward(self, x, emb=None):
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(seq).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Downsample(nn.Module):
    """Strided convolution halving the spatial extent (time axis untouched)."""

    def __init__(self, channels: int, dims: int = 2):
        super().__init__()
        stride = (1, 2, 2) if dims == 3 else 2
        kernel = (3, 3, 3) if dims == 3 else 3
        self.op = _conv(dims)(channels, channels, kernel, stride=stride, padding=1)

    def forward(self, x, emb=None):
        return self.op(x)


class Upsample(nn.Module):
    """Nearest-neighbour spatial doubling followed by a convolution."""

    def __init__(self, channels: int, dims: int = 2):
        super().__init__()
        self.dims = dims
        self.conv = _conv(dims)(channels, channels, 3, padding=1)

    def forward(self, x, emb=None):
        scale = (1, 2, 2) if self.dims == 3 else 2
        return self.conv(F.interpolate(x, scale_factor=scale, mode="nearest"))


class UNet(nn.Module):
    """Timestep-conditioned UNet over 2D images or 3D (time, H, W) volumes.

    Spatial resolution halves between levels; in 3D mode the time axis is
    kept at full length throughout. ``attention[i]`` enables temporal
    (3D) or spatial (2D) self-attention at level ``i``. ``cond_dim > 0``
    adds a projected conditioning vector to the timestep embedding, so
    it reaches every residual block.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        base_channels: int,
        channel_mults=(1, 2, 4),
        attention=(False, False, True),
        num_res_blocks: int = 2,
        cond_dim: int = 0,
        dims: int = 2,
        heads: int = 4,
    ):
        super().__init__()
        if len(attention) != len(channel_mults):
            raise ValueError("attention flags must match the number of levels")
        emb_dim = 4 * base_channels
        self.time_mlp = TimestepMLP(base_channels, emb_dim)
        self.cond_proj = (
            nn.Sequential(nn.Linear(cond_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
            if cond_dim
            else None
        )
        conv = _conv(dims)
        attn_cls = TemporalAttention if dims == 3 else SpatialAttention
        self.conv_in = conv(in_channels, base_channels, 3, padding=1)

        self.down = nn.ModuleList()
        skip_chs = [base_channels]
        ch = base_channels
        for level, mult in enumerate(channel_mults):
            out_ch = base_channels * mult
            for _ in range(num_res_blocks):
                blocks = [ResBlock(ch, out_ch, emb_dim, dims)]
                if attention[level]:
                    blocks.append(attn_cls(out_ch, heads))
                self.down.append(nn.ModuleList(blocks))
                ch = out_ch
                skip_chs.append(ch)
            if level < len(channel_mults) - 1:
                self.down.append(nn.ModuleList([Downsample(ch, dims)]))
                skip_chs.append(ch)

        self.mid = nn.ModuleList(
            [ResBlock(ch, ch, emb_dim, dims), attn_cls(ch, heads), ResBlock(ch, ch, emb_dim, dims)]
        )

        self.up = nn.ModuleList()
        for level in reversed(range(len(channel_mults))):
            out_ch = base_channels * channel_mults[level]
            for i in range(num_res_blocks + 1):
                blocks = [ResBlock(ch + skip_chs.pop(), out_ch, emb_dim, dims)]
                ch = out_ch
                if attention[level]:
                    blocks.append(attn_cls(ch, heads))
                if level > 0 and i == num_res_blocks:
                    blocks.append(Upsample(ch, dims))
                self.up.append(nn.ModuleList(blocks))

        self.out_norm = norm(ch)
        self.conv_out = conv(ch, out_channels, 3, padding=1)

    def embed(self, t, cond=None):
        emb = self.time_mlp(t)
        if self.cond_proj is not None:
            emb = emb + self.cond_proj(cond)
        return emb

    def forward(self, x, t, cond=None):
        emb = self.embed(t, cond)
        h = self.conv_in(x)
        skips = [h]
        for blocks in self.down:
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
        for block in self.mid:
            h = block(h, emb)
        for blocks in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, emb)
        return self.conv_out(F.silu(self.out_norm(h)))
