"""Checkpoint container for every trainable stage.

A checkpoint is a ``torch.save`` dict holding the stage name, its config
(as a plain dict), the noise schedule, trainer state, the seed and the
training random-stream state. Loading checks stage and config and
refuses on mismatch.
"""
from __future__ import annotations

from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def save_checkpoint(path, stage: str, config: dict, payload: dict, schedule=None,
                    seed: int | None = None, rng: torch.Generator | None = None, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config": dict(config),
        "schedule": schedule.to_dict() if schedule is not None else None,
        "seed": seed,
        "rng_state": rng.get_state() if rng is not None else None,
        "payload": payload,
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path, stage: str, expected_config: dict | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    if blob.get("stage") != stage:
        raise ConfigMismatchError(f"{path}: holds stage {blob.get('stage')!r}, expected {stage!r}")
    if expected_config is not None:
        stored = blob["config"]
        diff = sorted(k for k in set(stored) | set(expected_config)
                      if stored.get(k) != expected_config.get(k))
        if diff:
            raise ConfigMismatchError(f"{path}: config differs in {', '.join(diff)}")
    return blob
