"""Command-line entry point: ``trdm synth|train|forecast|evaluate|render``.

Exit codes: 0 success, 2 usage or config error, 3 missing prerequisite
(checkpoint or dataset), 4 data error (bad container, shapes, I/O).
"""
from __future__ import annotations

import argparse
import datetime as dt
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from trdm import data, metrics, pipeline
from trdm.checkpoint import CheckpointError
from trdm.config import ConfigError, RunConfig, load_config

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PREREQ = 3
EXIT_DATA = 4

log = logging.getLogger("trdm")


class UsageError(Exception):
    pass


# -- rasters ------------------------------------------------------------------

def to_pixels(rate, max_rate: float = 128.0) -> np.ndarray:
    """8-bit grey level: round(255 * log1p(min(rate, max)) / log1p(max))."""
    r = np.clip(np.asarray(rate, dtype=np.float64), 0.0, max_rate)
    return np.rint(255.0 * np.log1p(r) / math.log1p(max_rate)).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def render_sequence(seq: data.RadarSequence, out_dir, max_rate: float = 128.0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(seq.frames):
        p = out / f"frame_{i:03d}.pgm"
        write_pgm(p, to_pixels(frame, max_rate))
        paths.append(p)
    return paths


# -- commands -----------------------------------------------------------------

def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _outdir(args.out or cfg.data_dir)
    files = pipeline.write_synth_dataset(cfg, out)
    cfg.replace(data_dir=str(out)).write(out / "run_config.txt")
    print(f"wrote {len(files)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    out = _outdir(args.out or cfg.checkpoint_dir)
    cfg = cfg.replace(checkpoint_dir=str(out))
    result = pipeline.train_stage(args.stage, cfg, out, resume=args.resume,
                                  loss_log=out / f"{args.stage}_loss.csv")
    cfg.write(out / "run_config.txt")
    last = result.losses[-1][1] if result.losses else float("nan")
    print(f"{args.stage}: {len(result.losses)} steps, final loss {last:.5f}, checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    cfg = _resolve(args)
    members = args.members if args.members is not None else cfg.members
    if members < 1:
        raise UsageError("--members must be >= 1")
    ckpt_dir = args.checkpoints or cfg.checkpoint_dir
    pred_model = pipeline.load_trained("predictor", cfg, ckpt_dir)
    sr_model = pipeline.load_trained(cfg.reconstruct, cfg, ckpt_dir)
    seq = data.load_sequence(args.context)
    context = pipeline.context_from_sequence(seq, cfg, args.context_start)

    out = _outdir(args.out)
    rng = torch.Generator().manual_seed(cfg.seed)
    low, high = pipeline.two_stage_forecast(context, cfg, pred_model, sr_model, members, rng)
    start = seq.start_time + (args.context_start + data.CONTEXT_FRAMES) * dt.timedelta(seconds=data.CADENCE_S)
    for m in range(members):
        for tag, frames in (("low", low[m]), ("high", high[m])):
            s = data.RadarSequence(frames, start_time=start)
            data.save_sequence(s, out / f"member_{m:03d}_{tag}.trdm")
            render_sequence(s, out / "render" / f"member_{m:03d}_{tag}", cfg.max_rate)
    cfg.replace(members=members, checkpoint_dir=str(ckpt_dir)).write(out / "run_config.txt")
    print(f"wrote {members} members ({cfg.reconstruct}) to {out}")
    return EXIT_OK


def load_forecast_members(forecast_dir, resolution: str) -> np.ndarray:
    files = sorted(Path(forecast_dir).glob(f"member_*_{resolution}.trdm"))
    if not files:
        raise pipeline.MissingPrerequisite(f"no member_*_{resolution}.trdm files in {forecast_dir}")
    return np.stack([data.load_sequence(f).frames for f in files])


def evaluate(ensemble: np.ndarray, truth: data.RadarSequence, config: metrics.VerifyConfig):
    """Model and persistence tables for a 20-frame truth sequence."""
    frames = truth.frames
    if frames.shape[0] != data.WINDOW_FRAMES:
        raise ValueError(f"truth must hold 20 frames (4 context + 16 observed), got {frames.shape[0]}")
    size = ensemble.shape[-1]
    if frames.shape[-1] != size:
        frames = pipeline._pool_to(frames, size)
    if ensemble.shape[1:] != frames[data.CONTEXT_FRAMES:].shape:
        raise ValueError(f"forecast shape {ensemble.shape[1:]} does not match truth {frames[4:].shape}")
    obs = frames[data.CONTEXT_FRAMES:]
    model_table = metrics.lead_time_table(ensemble, obs, config)
    persistence = metrics.persistence_forecast(frames[: data.CONTEXT_FRAMES])
    persistence_table = metrics.lead_time_table(persistence[None], obs, config)
    return model_table, persistence_table


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    config = metrics.VerifyConfig(cfg.csi_threshold, cfg.fss_threshold, cfg.fss_window, cfg.max_rate)
    ensemble = load_forecast_members(args.forecast, args.resolution)
    truth = data.load_sequence(args.truth)
    model_table, persistence_table = evaluate(ensemble, truth, config)
    out = _outdir(args.out)
    model_table.write_csv(out / "metrics.csv")
    persistence_table.write_csv(out / "metrics_persistence.csv")
    lines = ["source," + model_table.to_csv().splitlines()[0]]
    for name, table in (("model", model_table), ("persistence", persistence_table)):
        lines += [f"{name},{row}" for row in table.to_csv().splitlines()[1:]]
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    cfg.write(out / "run_config.txt")
    print((out / "comparison.csv").read_text(), end="")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _resolve(args)
    seq = data.load_sequence(args.sequence)
    out = args.out or str(Path(args.sequence).with_suffix("")) + "_frames"
    paths = render_sequence(seq, _outdir(out), cfg.max_rate)
    cfg.write(Path(out) / "run_config.txt")
    print(f"wrote {len(paths)} PGM frames to {out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="trdm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic TRDM dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("stage", choices=pipeline.STAGES)
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", parents=[common], help="two-stage ensemble forecast")
    p.add_argument("--context", required=True, metavar="FILE", help="TRDM file holding the context frames")
    p.add_argument("--context-start", type=int, default=0, help="index of the first context frame")
    p.add_argument("--members", type=int)
    p.add_argument("--checkpoints", metavar="DIR", help="directory of trained stage checkpoints")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", parents=[common], help="score a forecast against truth and persistence")
    p.add_argument("--forecast", required=True, metavar="DIR")
    p.add_argument("--truth", required=True, metavar="FILE", help="20-frame TRDM sequence")
    p.add_argument("--resolution", choices=("high", "low"), default="high")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", parents=[common], help="write one PGM raster per frame")
    p.add_argument("sequence", metavar="FILE")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"trdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pipeline.MissingPrerequisite, FileNotFoundError) as exc:
        print(f"trdm: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (data.TRDMFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"trdm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
