"""The ``dlh`` command line.

Five subcommands cover the life of a model: ``generate-data``, ``train``,
``evaluate``, ``rollout`` and ``diagnose``. All of them accept ``--config``
(INI), ``--seed``, ``--out`` and ``--deterministic``; flags override the
file. Every command re-emits its resolved configuration as canonical JSON
in the output directory, and the report-producing commands render
matplotlib figures next to their CSV/JSON output.

Exit codes: 0 on success, 2 for configuration/usage problems, 1 for
runtime failures (missing files, bad checkpoints, diverged training).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np
import torch
from PIL import Image

from . import figures
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_run_config, write_resolved
from .distributions import ContractViolation
from .elbo import TrainingDiverged, train
from .engine import filter_sequence, frames_to_tensor, open_loop_rollout
from .evaluation import (
    kl_per_level_report,
    level_sampling_ablation,
    mean_depth,
    prior_change_report,
    run_evaluation,
)
from .moving_ball import (
    ArraySampler,
    BallDataset,
    DatasetFormatError,
    ProceduralSampler,
    export_dataset,
    generate_dataset,
    generate_sequence,
)
from .networks import HierarchyModel, NonFiniteActivation

_RUNTIME_ERRORS = (
    CheckpointError,
    DatasetFormatError,
    NonFiniteActivation,
    TrainingDiverged,
    ContractViolation,
    FileNotFoundError,
    NotADirectoryError,
    PermissionError,
)


def _common(fn):
    fn = click.option(
        "--deterministic",
        is_flag=True,
        help="single-threaded deterministic kernels; zeroed wallclock column",
    )(fn)
    fn = click.option("--out", type=str, default=None, help="output directory")(fn)
    fn = click.option("--seed", type=int, default=None, help="master seed")(fn)
    fn = click.option(
        "--config", "config_path", type=str, default=None, help="INI run config"
    )(fn)
    return fn


def _guarded(body):
    try:
        body()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except _RUNTIME_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def _resolve(config_path, seed, out, deterministic) -> RunConfig:
    cfg = load_run_config(config_path, seed=seed, out=out, deterministic=deterministic)
    if cfg.run.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return cfg


def _replace_cfg(obj, **kwargs):
    """dataclasses.replace with validation surfacing as ConfigError."""
    try:
        return dataclasses.replace(obj, **kwargs)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc


def _load_model(path: str) -> tuple[HierarchyModel, object]:
    payload = load_checkpoint(path)
    payload.model.eval()
    return payload.model, payload


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save_frames_png(frames: np.ndarray, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    quant = np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)
    for t in range(frames.shape[0]):
        Image.fromarray(quant[t]).save(out_dir / f"frame{t:04d}.png")


def _load_context_dir(path: str) -> np.ndarray:
    """Frames [T, H, W, C] in [0, 1] from a directory of PNGs, sorted by name."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetFormatError(f"context directory {root} does not exist")
    files = sorted(root.glob("*.png"))
    if not files:
        raise DatasetFormatError(f"no .png frames under {root}")
    frames = [
        np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
        for f in files
    ]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise DatasetFormatError(
            f"context frames under {root} disagree on shape: {sorted(shapes)}"
        )
    return np.stack(frames)


@click.group()
def main():
    """Hierarchical latent video model: data, training, evaluation."""


@main.command("generate-data")
@_common
@click.option("--lambda", "lambda_", type=float, default=None, help="color switch probability")
@click.option("--count", type=int, default=100, show_default=True, help="number of sequences")
@click.option("--length", type=int, default=None, help="frames per sequence")
def generate_data(config_path, seed, out, deterministic, lambda_, count, length):
    """Export a Moving Ball dataset as PNG trees plus manifest.json."""

    def body():
        cfg = _resolve(config_path, seed, out, deterministic)
        if count < 1:
            raise ConfigError(f"--count must be >= 1, got {count}")
        data_cfg = cfg.data
        if lambda_ is not None:
            data_cfg = _replace_cfg(data_cfg, switch_prob=lambda_)
        if length is not None:
            data_cfg = _replace_cfg(data_cfg, sequence_length=length)
        out_dir = Path(cfg.run.out)
        manifest = export_dataset(data_cfg, count, out_dir)
        write_resolved(dataclasses.replace(cfg, data=data_cfg), out_dir)
        click.echo(
            f"wrote {manifest['count']} sequences of {manifest['sequence_length']} "
            f"frames (switch_prob={manifest['switch_prob']:g}) to {out_dir}"
        )

    _guarded(body)


@main.command("train")
@_common
@click.option("--dataset", "dataset_path", type=str, default=None, help="exported dataset to train on (default: on-the-fly)")
@click.option("--iters", type=int, default=None, help="override total iterations")
@click.option("--resume", "resume_path", type=str, default=None, help="checkpoint to continue from")
def cmd_train(config_path, seed, out, deterministic, dataset_path, iters, resume_path):
    """Train a model, logging metrics.csv and periodic checkpoints."""

    def body():
        cfg = _resolve(config_path, seed, out, deterministic)
        train_cfg = cfg.train
        if iters is not None:
            train_cfg = _replace_cfg(train_cfg, total_iters=iters)
        out_dir = Path(cfg.run.out)

        resume = None
        if resume_path is not None:
            payload = load_checkpoint(resume_path)
            model = payload.model
            if config_path is not None and dataclasses.asdict(
                model.config
            ) != dataclasses.asdict(cfg.model):
                raise ConfigError(
                    "config [model] disagrees with the checkpoint architecture; "
                    "drop the section or match it"
                )
            resume = {
                "iteration": payload.iteration,
                "optimizer_state": payload.optimizer_state,
                "torch_rng": payload.torch_rng,
                "sampler_state": payload.sampler_state,
            }
        else:
            torch.manual_seed(cfg.run.seed)
            model = HierarchyModel(cfg.model)

        if dataset_path is not None:
            dataset = BallDataset(dataset_path)
            sampler = ArraySampler(dataset.load_all(), seed=train_cfg.seed)
        else:
            sampler = ProceduralSampler(cfg.data, seed=train_cfg.seed)

        write_resolved(dataclasses.replace(cfg, train=train_cfg), out_dir)
        rows = train(
            model,
            train_cfg,
            sampler,
            out_dir,
            deterministic=cfg.run.deterministic,
            resume=resume,
        )
        if rows:
            figures.save_training_curves(rows, out_dir / "training_curves.png")
            click.echo(
                f"finished at iter {int(rows[-1]['iter'])}: loss {rows[-1]['loss']:.2f}, "
                f"mean depth {rows[-1]['mean_depth']:.3f}"
            )
        click.echo(f"checkpoint: {out_dir / 'checkpoint.pt'}")

    _guarded(body)


def _eval_frames(cfg: RunConfig, dataset_path: Optional[str], count: int, length: Optional[int]):
    """Frames [M, T, H, W, C] plus the switch rate they were generated at."""
    if dataset_path is not None:
        dataset = BallDataset(dataset_path)
        return dataset.load_all(), dataset.config.switch_prob
    data_cfg = cfg.data
    if length is not None:
        data_cfg = _replace_cfg(data_cfg, sequence_length=length)
    frames, _ = generate_dataset(data_cfg, count)
    return frames, data_cfg.switch_prob


@main.command("evaluate")
@_common
@click.option("--checkpoint", "checkpoint_path", type=str, required=True)
@click.option("--dataset", "dataset_path", type=str, default=None, help="exported dataset (default: procedural from config)")
@click.option("--count", type=int, default=32, show_default=True, help="procedural sequences when no dataset given")
@click.option("--context", type=int, default=30, show_default=True)
@click.option("--horizon", type=int, default=None, help="prediction length (default: rest of sequence)")
@click.option("--k", type=int, default=100, show_default=True, help="rollouts per sequence, best kept")
@click.option("--metric", type=click.Choice(["ssim", "psnr"]), default="ssim", show_default=True)
def cmd_evaluate(config_path, seed, out, deterministic, checkpoint_path, dataset_path, count, context, horizon, k, metric):
    """Best-of-k prediction metrics plus filtering diagnostics."""

    def body():
        cfg = _resolve(config_path, seed, out, deterministic)
        for name, val in (("--count", count), ("--context", context), ("--k", k)):
            if val < 1:
                raise ConfigError(f"{name} must be >= 1, got {val}")
        if horizon is not None and horizon < 1:
            raise ConfigError(f"--horizon must be >= 1, got {horizon}")
        model, _ = _load_model(checkpoint_path)
        frames, lam = _eval_frames(cfg, dataset_path, count, None)
        report = run_evaluation(
            model,
            frames,
            lam,
            context=context,
            horizon=horizon,
            k=k,
            seed=cfg.run.seed,
            metric=metric,
        )
        out_dir = Path(cfg.run.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "ssim", "psnr"])
            for row in report.per_frame:
                writer.writerow([row["t"], f"{row['ssim']:.6f}", f"{row['psnr']:.6f}"])
        _write_json(
            out_dir / "summary.json",
            {
                "mean_ssim": report.mean_ssim,
                "mean_psnr": report.mean_psnr,
                "mean_depth": report.mean_depth,
                "kl_per_level": report.kl_per_level,
                "prior_table": report.prior_table,
                "num_sequences": report.num_sequences,
                "context": report.context,
                "horizon": report.horizon,
                "k": report.k,
            },
        )
        figures.save_eval_curves(report.per_frame, out_dir / "eval_curves.png")
        write_resolved(cfg, out_dir)
        click.echo(
            f"mean ssim {report.mean_ssim:.4f}, mean psnr {report.mean_psnr:.2f} dB, "
            f"mean depth {report.mean_depth:.3f} over {report.num_sequences} sequences"
        )

    _guarded(body)


@main.command("rollout")
@_common
@click.option("--checkpoint", "checkpoint_path", type=str, required=True)
@click.option("--context-dir", "context_dir", type=str, default=None, help="directory of PNG frames to condition on (overrides --dataset)")
@click.option("--dataset", "dataset_path", type=str, default=None, help="context source (default: procedural)")
@click.option("--index", "seq_index", type=int, default=0, show_default=True, help="which sequence to take context from")
@click.option("--context", type=int, default=None, help="context frames to filter [default: 8, or every frame of --context-dir]")
@click.option("--horizon", type=int, default=50, show_default=True)
@click.option("--argmax", is_flag=True, help="threshold indicators at 0.5 instead of sampling")
def cmd_rollout(config_path, seed, out, deterministic, checkpoint_path, context_dir, dataset_path, seq_index, context, horizon, argmax):
    """Open-loop generation: frames, indicators.csv and a change raster."""

    def body():
        cfg = _resolve(config_path, seed, out, deterministic)
        if context is not None and context < 1:
            raise ConfigError(f"--context must be >= 1, got {context}")
        if horizon < 0:
            raise ConfigError(f"--horizon must be >= 0, got {horizon}")
        if seq_index < 0:
            raise ConfigError(f"--index must be >= 0, got {seq_index}")
        model, _ = _load_model(checkpoint_path)
        if context_dir is not None:
            seq = _load_context_dir(context_dir)
            ctx = seq.shape[0] if context is None else context
        else:
            ctx = 8 if context is None else context
            if dataset_path is not None:
                dataset = BallDataset(dataset_path)
                seq = dataset.load(seq_index)
            else:
                data_cfg = cfg.data
                if ctx > data_cfg.sequence_length:
                    data_cfg = _replace_cfg(data_cfg, sequence_length=ctx)
                seq, _ = generate_sequence(data_cfg, seq_index)
        if ctx > seq.shape[0]:
            raise ConfigError(
                f"--context {ctx} exceeds sequence length {seq.shape[0]}"
            )
        gen = torch.Generator(device="cpu").manual_seed(cfg.run.seed)
        with torch.no_grad():
            clip = frames_to_tensor(seq[None, :ctx]).to(model.device)
            state = filter_sequence(model, clip, gen).final_state
        N = model.config.num_levels
        if horizon > 0:
            trace = open_loop_rollout(
                model,
                state,
                horizon,
                torch.Generator(device="cpu").manual_seed(cfg.run.seed + 1),
                indicator_mode="argmax" if argmax else "sample",
            )
            frames = np.clip(trace.frames[:, 0], 0.0, 1.0)
            indicators = trace.indicators[:, 0]
        else:
            frames = np.zeros((0,) + model.config.frame_shape, dtype=np.float32)
            indicators = np.zeros((0, N), dtype=np.int8)
        out_dir = Path(cfg.run.out)
        _save_frames_png(frames, out_dir / "frames")
        with open(out_dir / "indicators.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"e_L{n}" for n in range(1, N + 1)])
            for t in range(indicators.shape[0]):
                writer.writerow([t] + [int(v) for v in indicators[t]])
        if horizon > 0:
            figures.save_indicator_raster(indicators, out_dir / "indicator_raster.png")
            figures.save_image_grid(
                frames[: min(16, horizon)], out_dir / "rollout_grid.png",
                title="first rollout frames",
            )
        write_resolved(cfg, out_dir)
        depth_txt = f", mean depth {mean_depth(indicators):.3f}" if horizon else ""
        click.echo(f"rolled out {horizon} frames{depth_txt}; outputs in {out_dir}")

    _guarded(body)


@main.command("diagnose")
@_common
@click.option("--checkpoint", "checkpoint_path", type=str, required=True)
@click.option("--dataset", "dataset_path", type=str, default=None, help="use this dataset instead of procedural sweeps")
@click.option("--count", type=int, default=24, show_default=True, help="procedural sequences per switch rate")
@click.option("--lambdas", type=str, default="0,0.1,0.3", show_default=True, help="procedural switch rates for the prior table")
@click.option("--draws", type=int, default=16, show_default=True, help="samples per level-sampling grid")
def cmd_diagnose(config_path, seed, out, deterministic, checkpoint_path, dataset_path, count, lambdas, draws):
    """Structure diagnostics: depth, per-level KL, prior table, ablations."""

    def body():
        cfg = _resolve(config_path, seed, out, deterministic)
        if count < 1:
            raise ConfigError(f"--count must be >= 1, got {count}")
        if draws < 2:
            raise ConfigError(f"--draws must be >= 2, got {draws}")
        try:
            lams = [float(v) for v in lambdas.split(",") if v.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"cannot parse --lambdas {lambdas!r}: {exc}") from exc
        if not lams:
            raise ConfigError("--lambdas must name at least one rate")
        model, _ = _load_model(checkpoint_path)
        N = model.config.num_levels

        if dataset_path is not None:
            dataset = BallDataset(dataset_path)
            sets = {dataset.config.switch_prob: dataset.load_all()}
        else:
            sets = {}
            for lam in lams:
                data_cfg = _replace_cfg(cfg.data, switch_prob=lam)
                sets[lam], _ = generate_dataset(data_cfg, count)
        primary = sets[min(sets)]

        kl = kl_per_level_report(model, primary, seed=cfg.run.seed)
        depth_frames = primary
        gen = torch.Generator(device="cpu").manual_seed(cfg.run.seed)
        with torch.no_grad():
            clip = frames_to_tensor(depth_frames[:8]).to(model.device)
            result = filter_sequence(model, clip, gen)
        depth = mean_depth(result.indicators)
        prior_rows = prior_change_report(model, sets, seed=cfg.run.seed) if N >= 2 else []

        with torch.no_grad():
            one = frames_to_tensor(primary[:1]).to(model.device)
            state = filter_sequence(
                model, one, torch.Generator(device="cpu").manual_seed(cfg.run.seed + 1)
            ).final_state
        out_dir = Path(cfg.run.out)
        ablations = {}
        for level in range(1, N + 1):
            res = level_sampling_ablation(
                model, state, [level], count=draws, seed=cfg.run.seed + level
            )
            ablations[f"L{level}"] = res.mean_variance
            figures.save_image_grid(
                res.frames,
                out_dir / f"ablation_L{level}.png",
                title=f"resampling level {level} only",
            )
        # combined lower-level grid; for N = 2 it would duplicate L1 alone
        if N >= 3:
            low = list(range(1, N))
            res = level_sampling_ablation(
                model, state, low, count=draws, seed=cfg.run.seed + N + 1
            )
            ablations["L" + "+".join(str(v) for v in low)] = res.mean_variance
            figures.save_image_grid(
                res.frames,
                out_dir / "ablation_lower.png",
                title=f"resampling levels {low}",
            )

        _write_json(
            out_dir / "diagnostics.json",
            {
                "mean_depth": depth,
                "kl_per_level": [float(v) for v in kl.combined],
                "kl_state": [float(v) for v in kl.state],
                "kl_indicator": [float(v) for v in kl.indicator],
                "prior_table": prior_rows,
                "level_sampling_variance": ablations,
            },
        )
        figures.save_kl_bars(kl.state, kl.indicator, out_dir / "kl_per_level.png")
        if prior_rows:
            figures.save_prior_change_bars(prior_rows, out_dir / "prior_change.png")
        write_resolved(cfg, out_dir)
        click.echo(
            f"mean depth {depth:.3f}; per-level KL "
            + ", ".join(f"L{n + 1}={v:.2f}" for n, v in enumerate(kl.combined))
        )

    _guarded(body)


if __name__ == "__main__":
    main()
