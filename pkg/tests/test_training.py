import pytest
import torch

from conftest import tiny_predictor_config
from trdm.checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, save_checkpoint
from trdm.diffusion import NoiseSchedule, make_linear_schedule
from trdm.predictor import PredictorConfig, SeqPredictor, train_step
from trdm.training import Trainer


def batch(seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(2, 4, 1, 8, 8, generator=g) * 2 - 1, torch.rand(2, 16, 1, 8, 8, generator=g) * 2 - 1


def test_grad_clip_bounds_update():
    torch.manual_seed(0)
    lin = torch.nn.Linear(4, 1)
    trainer = Trainer(lin, lr=1.0, grad_clip=1e-3)
    loss = (lin(torch.full((1, 4), 1e3)) ** 2).sum()
    before = lin.weight.detach().clone()
    trainer.update(loss)
    # Adam's first step moves each weight by ~lr regardless; clipping caps the gradient itself
    total = torch.cat([p.grad.reshape(-1) for p in lin.parameters()]).norm()
    assert total <= 1e-3 + 1e-9
    assert not torch.equal(before, lin.weight)


def test_ema_tracks_weights():
    torch.manual_seed(0)
    lin = torch.nn.Linear(3, 1)
    trainer = Trainer(lin, ema_decay=0.9)
    start = lin.weight.detach().clone()
    trainer.update((lin(torch.ones(1, 3)) - 5).abs().sum())
    assert torch.allclose(trainer.ema.weight, 0.9 * start + 0.1 * lin.weight, atol=1e-7)
    assert not any(p.requires_grad for p in trainer.ema.parameters())


def test_trainer_state_round_trip():
    torch.manual_seed(0)
    m = SeqPredictor(tiny_predictor_config())
    tr = Trainer(m)
    schedule = make_linear_schedule(4, 0.05, 0.5)
    g = torch.Generator().manual_seed(1)
    for _ in range(2):
        train_step(batch(), tr, schedule, g)
    state = tr.state_dict()
    torch.manual_seed(5)
    m2 = SeqPredictor(tiny_predictor_config())
    tr2 = Trainer(m2)
    tr2.load_state_dict(state)
    assert tr2.step_count == 2
    g2 = torch.Generator().manual_seed(7)
    g3 = torch.Generator().manual_seed(7)
    assert train_step(batch(1), tr, schedule, g2).loss == train_step(batch(1), tr2, schedule, g3).loss


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    cfg = tiny_predictor_config()
    m = SeqPredictor(cfg)
    tr = Trainer(m)
    schedule = make_linear_schedule(4, 0.05, 0.5)
    g = torch.Generator().manual_seed(3)
    train_step(batch(), tr, schedule, g)
    path = tmp_path / "p.pt"
    save_checkpoint(path, "predictor", cfg.to_dict(), tr.state_dict(), schedule=schedule, seed=3, rng=g)
    blob = load_checkpoint(path, "predictor", cfg.to_dict())
    assert PredictorConfig.from_dict(blob["config"]) == cfg
    assert NoiseSchedule.from_dict(blob["schedule"]) == schedule
    assert blob["seed"] == 3
    restored = torch.Generator()
    restored.set_state(blob["rng_state"])
    assert torch.equal(torch.rand(5, generator=restored), torch.rand(5, generator=g))
    m2 = SeqPredictor(cfg)
    m2.load_state_dict(blob["payload"]["model"])
    assert all(torch.equal(a, b) for a, b in zip(m.state_dict().values(), m2.state_dict().values()))
    assert blob["payload"]["optimizer"]["state"]
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_refuses_mismatch(tmp_path):
    cfg = tiny_predictor_config()
    path = tmp_path / "p.pt"
    save_checkpoint(path, "predictor", cfg.to_dict(), {})
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, "predictor", tiny_predictor_config(base_channels=16).to_dict())
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, "ssr")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt", "predictor")


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "v.pt"
    torch.save({"format_version": 99, "stage": "predictor"}, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "predictor")
