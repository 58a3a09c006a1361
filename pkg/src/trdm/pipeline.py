"""Stage construction, dataset loading, training loops and two-stage inference.

Everything here is driven by a :class:`~trdm.config.RunConfig`; the CLI
is a thin layer over these functions.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from trdm import data, predictor, sr_latent, sr_spatial
from trdm.checkpoint import load_checkpoint, save_checkpoint
from trdm.config import ConfigError, RunConfig
from trdm.diffusion import NoiseSchedule, make_linear_schedule
from trdm.training import Trainer

log = logging.getLogger(__name__)

STAGES = ("predictor", "ssr", "autoencoder", "lsr")
MANIFEST = "manifest.json"


class MissingPrerequisite(RuntimeError):
    """A required checkpoint or dataset is absent."""


def make_schedule(cfg: RunConfig) -> NoiseSchedule:
    return make_linear_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)


def skip_schedule(cfg: RunConfig) -> tuple:
    return (cfg.diffusion_steps, cfg.beta_start, cfg.beta_end) if cfg.noise_skip else ()


def predictor_config(cfg: RunConfig) -> predictor.PredictorConfig:
    return predictor.PredictorConfig(
        frame_size=cfg.low_size,
        base_channels=cfg.predictor_base_channels,
        channel_mults=cfg.predictor_channel_mults,
        attention=cfg.predictor_attention,
        num_res_blocks=cfg.predictor_res_blocks,
        embed_dim=cfg.predictor_embed_dim,
        encoder_channels=cfg.predictor_encoder_channels,
        encoder_blocks=cfg.predictor_encoder_blocks,
        heads=cfg.heads,
        skip_schedule=skip_schedule(cfg),
    )


def sr_config(cfg: RunConfig) -> sr_spatial.SRConfig:
    return sr_spatial.SRConfig(
        image_size=cfg.hr_size,
        factor=cfg.sr_factor,
        base_channels=cfg.ssr_base_channels,
        channel_mults=cfg.ssr_channel_mults,
        attention=cfg.ssr_attention,
        num_res_blocks=cfg.ssr_res_blocks,
        heads=cfg.heads,
        skip_schedule=skip_schedule(cfg),
    )


def ae_config(cfg: RunConfig) -> sr_latent.AEConfig:
    ae = sr_latent.AEConfig(image_size=cfg.hr_size, channels=cfg.ae_channels, blocks=cfg.ae_blocks)
    if ae.latent_size != cfg.low_size:
        raise ConfigError("autoencoder depth must downsample by exactly sr_factor")
    return ae


def lsr_config(cfg: RunConfig) -> sr_latent.LSRConfig:
    return sr_latent.LSRConfig(
        ae=ae_config(cfg),
        embed=sr_latent.EmbedConfig(
            image_size=cfg.low_size, patch=cfg.embed_patch, width=cfg.embed_width,
            layers=cfg.embed_layers, heads=cfg.embed_heads,
        ),
        base_channels=cfg.lsr_base_channels,
        channel_mults=cfg.lsr_channel_mults,
        attention=cfg.lsr_attention,
        num_res_blocks=cfg.lsr_res_blocks,
        heads=cfg.heads,
        skip_schedule=skip_schedule(cfg),
    )


def stage_config(stage: str, cfg: RunConfig) -> dict:
    """The part of the run config a checkpoint of ``stage`` must agree with."""
    diffusion = [cfg.diffusion_steps, cfg.beta_start, cfg.beta_end]
    if stage == "predictor":
        return {"model": predictor_config(cfg).to_dict(), "diffusion": diffusion}
    if stage == "ssr":
        return {"model": sr_config(cfg).to_dict(), "diffusion": diffusion}
    if stage == "autoencoder":
        return {"model": ae_config(cfg).to_dict()}
    if stage == "lsr":
        return {"model": lsr_config(cfg).to_dict(), "diffusion": diffusion}
    raise ValueError(f"unknown stage {stage!r}")


def build_model(stage: str, cfg: RunConfig, autoencoder=None) -> torch.nn.Module:
    if stage == "predictor":
        return predictor.SeqPredictor(predictor_config(cfg))
    if stage == "ssr":
        return sr_spatial.SSRModel(sr_config(cfg))
    if stage == "autoencoder":
        return sr_latent.Autoencoder(ae_config(cfg))
    if stage == "lsr":
        return sr_latent.LSRModel(lsr_config(cfg), autoencoder)
    raise ValueError(f"unknown stage {stage!r}")


# -- datasets -----------------------------------------------------------------

def write_synth_dataset(cfg: RunConfig, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(cfg.synth_count):
        seq = data.synth_sequence(cfg.seed, i, cfg.synth_size, cfg.synth_size, cfg.synth_frames)
        name = f"seq_{i:05d}.trdm"
        data.save_sequence(seq, out / name)
        names.append(name)
    manifest = {"seed": cfg.seed, "count": cfg.synth_count, "files": names}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [out / n for n in names]


def dataset_files(data_dir) -> list[Path]:
    d = Path(data_dir)
    manifest = d / MANIFEST
    if manifest.exists():
        files = [d / n for n in json.loads(manifest.read_text())["files"]]
    else:
        files = sorted(d.glob("*.trdm"))
    if not files:
        raise MissingPrerequisite(f"no TRDM sequences found in {d}")
    return files


def _pool_to(frames: np.ndarray, size: int) -> np.ndarray:
    h = frames.shape[-1]
    if h == size:
        return frames
    if h % size:
        raise ValueError(f"frames of size {h} cannot be area-pooled to {size}")
    return data.downsample_area(frames, h // size)


def sequence_windows(seqs, cfg: RunConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """All normalized (context, target) windows at predictor resolution."""
    spec = data.NormalizationSpec(cfg.max_rate)
    samples = []
    for seq in seqs:
        low = data.RadarSequence(_pool_to(seq.frames, cfg.low_size), seq.start_time)
        samples.extend(data.make_windows(low, cfg.window_stride, spec=spec))
    if not samples:
        raise MissingPrerequisite("dataset holds no 20-frame windows")
    return data.collate(samples)


def load_windows(files, cfg: RunConfig) -> tuple[torch.Tensor, torch.Tensor]:
    return sequence_windows((data.load_sequence(f) for f in files), cfg)


def sr_pairs(frames_mm: np.ndarray, cfg: RunConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized (low, high) pairs; low is the area-pooled high in mm/h."""
    spec = data.NormalizationSpec(cfg.max_rate)
    high_mm = _pool_to(frames_mm, cfg.hr_size)
    low_mm = data.downsample_area(high_mm, cfg.sr_factor)
    high = torch.from_numpy(data.normalize(high_mm, spec).astype(np.float32))[:, None]
    low = torch.from_numpy(data.normalize(low_mm, spec).astype(np.float32))[:, None]
    return low, high


def sequence_sr_pairs(seqs, cfg: RunConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Every frame of every sequence as a normalized (low, high) pair."""
    lows, highs = [], []
    for seq in seqs:
        low, high = sr_pairs(seq.frames, cfg)
        lows.append(low)
        highs.append(high)
    return torch.cat(lows), torch.cat(highs)


def load_sr_pairs(files, cfg: RunConfig) -> tuple[torch.Tensor, torch.Tensor]:
    return sequence_sr_pairs((data.load_sequence(f) for f in files), cfg)


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list
    checkpoint: Path
    model: torch.nn.Module
    trainer: Trainer


def checkpoint_path(ckpt_dir, stage: str) -> Path:
    return Path(ckpt_dir) / f"{stage}.pt"


def load_autoencoder(cfg: RunConfig, ckpt_dir) -> sr_latent.Autoencoder:
    path = checkpoint_path(ckpt_dir, "autoencoder")
    if not path.exists():
        raise MissingPrerequisite(f"lsr needs a trained autoencoder at {path}")
    blob = load_checkpoint(path, "autoencoder", stage_config("autoencoder", cfg))
    ae = build_model("autoencoder", cfg)
    ae.load_state_dict(blob["payload"]["ema"])
    return ae


def train_stage(stage: str, cfg: RunConfig, ckpt_dir, dataset=None, resume: bool = False,
                loss_log=None) -> TrainResult:
    """Run ``cfg.steps`` updates of ``stage`` and checkpoint the result.

    ``dataset`` is the tensor tuple the stage consumes (windows for the
    predictor, (low, high) pairs otherwise); it is loaded from
    ``cfg.data_dir`` when omitted. With ``resume`` the trainer, EMA and
    random stream continue from the existing checkpoint, so a resumed
    run reproduces the uninterrupted loss trajectory.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    ckpt = checkpoint_path(ckpt_dir, stage)
    autoencoder = load_autoencoder(cfg, ckpt_dir) if stage == "lsr" else None
    if dataset is None:
        files = dataset_files(cfg.data_dir)
        dataset = load_windows(files, cfg) if stage == "predictor" else load_sr_pairs(files, cfg)

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = build_model(stage, cfg, autoencoder)
    params = model.trainable_parameters() if stage == "lsr" else None
    trainer = Trainer(model, lr=cfg.learning_rate, grad_clip=cfg.grad_clip,
                      ema_decay=cfg.ema_decay, params=params, dump_dir=Path(ckpt_dir) / "dumps")
    rng = torch.Generator().manual_seed(cfg.seed)
    schedule = make_schedule(cfg)
    expected = stage_config(stage, cfg)

    if resume and ckpt.exists():
        blob = load_checkpoint(ckpt, stage, expected)
        trainer.load_state_dict(blob["payload"])
        rng.set_state(blob["rng_state"])
    elif stage == "lsr":
        with torch.no_grad():
            sr_latent.fit_latent_stats(model, dataset[1][:256])
            trainer.ema.latent_mean.copy_(model.latent_mean)
            trainer.ema.latent_std.copy_(model.latent_std)

    n = dataset[0].shape[0]
    losses = []
    for _ in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=rng)
        if stage == "predictor":
            out = predictor.train_step((dataset[0][idx], dataset[1][idx]), trainer, schedule, rng)
        elif stage == "ssr":
            out = sr_spatial.train_step_ssr((dataset[0][idx], dataset[1][idx]), trainer, schedule, rng)
        elif stage == "autoencoder":
            out = sr_latent.train_autoencoder(dataset[1][idx], trainer, rng)
        else:
            out = sr_latent.train_step_lsr((dataset[0][idx], dataset[1][idx]), trainer, schedule, rng)
        losses.append((trainer.step_count, out.loss))
        if trainer.step_count % 100 == 0:
            log.info("%s step %d loss %.5f", stage, trainer.step_count, out.loss)

    save_checkpoint(ckpt, stage, expected, trainer.state_dict(), schedule=schedule,
                    seed=cfg.seed, rng=rng)
    if loss_log is not None:
        _append_losses(loss_log, losses, fresh=not resume)
    return TrainResult(losses, ckpt, model, trainer)


def _append_losses(path, losses, fresh: bool):
    path = Path(path)
    new = fresh or not path.exists()
    with path.open("w" if new else "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(("step", "loss"))
        for step, loss in losses:
            writer.writerow((step, f"{loss:.8f}"))


def load_trained(stage: str, cfg: RunConfig, ckpt_dir) -> torch.nn.Module:
    """EMA weights of a trained stage, ready for sampling."""
    path = checkpoint_path(ckpt_dir, stage)
    if not path.exists():
        raise MissingPrerequisite(f"missing {stage} checkpoint at {path}")
    blob = load_checkpoint(path, stage, stage_config(stage, cfg))
    autoencoder = build_model("autoencoder", cfg) if stage == "lsr" else None
    model = build_model(stage, cfg, autoencoder)
    model.load_state_dict(blob["payload"]["ema"])
    return model.eval()


# -- inference --------------------------------------------------------------------

def context_from_sequence(seq: data.RadarSequence, cfg: RunConfig, start: int = 0) -> np.ndarray:
    """(4, low, low) context in mm/h, area-pooled from the sequence frames."""
    frames = seq.frames[start:start + data.CONTEXT_FRAMES]
    if frames.shape[0] != data.CONTEXT_FRAMES:
        raise ValueError(f"need 4 context frames from index {start}, sequence has {len(seq)}")
    try:
        return _pool_to(frames, cfg.low_size)
    except ValueError as exc:
        raise ValueError(f"context frames of size {frames.shape[-2:]} incompatible with "
                         f"{cfg.low_size}x{cfg.low_size} prediction grid") from exc


@torch.no_grad()
def two_stage_forecast(context_mm: np.ndarray, cfg: RunConfig, pred_model, sr_model,
                       members: int, rng: torch.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Low-res (members, 16, h, w) and high-res (members, 16, H, W) forecasts in mm/h."""
    spec = data.NormalizationSpec(cfg.max_rate)
    schedule = make_schedule(cfg)
    ctx = torch.from_numpy(data.normalize(context_mm, spec).astype(np.float32))[:, None]
    low = predictor.forecast(ctx, members, pred_model, schedule, rng, cfg.clip_denoised)
    highs = []
    for m in range(members):
        if cfg.reconstruct == "ssr":
            high = sr_spatial.super_resolve(low[m], sr_model, schedule, rng, cfg.clip_denoised)
        else:
            high = sr_latent.super_resolve_latent(low[m], sr_model, schedule, rng)
        highs.append(high[:, 0].numpy())
    low_mm = data.denormalize(low[:, :, 0].numpy(), spec).astype(np.float32)
    high_mm = data.denormalize(np.stack(highs), spec).astype(np.float32)
    return low_mm, high_mm
