"""Optimizer wrapper shared by all trainable stages.

Adam with gradient-norm clipping and an exponential moving average of
the weights; the EMA copy is what gets used for sampling.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class StepOutput:
    """Loss of one update plus the tensors it was computed from."""

    loss: float
    eps: torch.Tensor
    eps_hat: torch.Tensor
    t: torch.Tensor


class Trainer:
    def __init__(
        self,
        model: nn.Module,
        lr: float = 2e-4,
        grad_clip: float = 1.0,
        ema_decay: float = 0.999,
        params=None,
        dump_dir: str | Path | None = None,
    ):
        self.model = model
        self.params = [p for p in (params if params is not None else model.parameters()) if p.requires_grad]
        self.optimizer = torch.optim.Adam(self.params, lr=lr)
        self.grad_clip = grad_clip
        self.ema_decay = ema_decay
        self.ema = copy.deepcopy(model).eval()
        for p in self.ema.parameters():
            p.requires_grad_(False)
        self.step_count = 0
        self.dump_dir = Path(dump_dir) if dump_dir else None

    def update(self, loss: torch.Tensor) -> float:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at step {self.step_count}", self._dump()
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.params, self.grad_clip)
        self.optimizer.step()
        self._update_ema()
        self.step_count += 1
        return value

    @torch.no_grad()
    def _update_ema(self):
        d = self.ema_decay
        for e, p in zip(self.ema.parameters(), self.model.parameters()):
            if p.requires_grad:
                e.mul_(d).add_(p.detach(), alpha=1.0 - d)
            else:
                e.copy_(p)
        for e, b in zip(self.ema.buffers(), self.model.buffers()):
            e.copy_(b)

    def _dump(self) -> Path | None:
        if self.dump_dir is None:
            return None
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        path = self.dump_dir / f"diverged_step{self.step_count}.pt"
        torch.save({"model": self.model.state_dict(), "optimizer": self.optimizer.state_dict(),
                    "step": self.step_count}, path)
        log.error("training diverged; state dumped to %s", path)
        return path

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "ema": self.ema.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step_count,
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.ema.load_state_dict(state["ema"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step_count = int(state["step"])
