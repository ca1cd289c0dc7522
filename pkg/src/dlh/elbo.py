"""Loss assembly, the KL warmup schedule and the training loop.

The sequence objective is the negative evidence lower bound

    loss = mean_over_batch [ -sum_t recon_t
                             + beta * sum_t (kl_state_t + kl_indicator_t) ]

with beta ramping linearly from 0 to 1 over ``beta_anneal_iters`` so early
training is dominated by reconstruction. Both KL families are scaled by
beta together.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .distributions import ContractViolation
from .engine import ElboTerms, FilterResult, filter_sequence, frames_to_tensor
from .networks import HierarchyModel


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last good checkpoint is kept on disk."""


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 20000
    batch_size: int = 100
    sequence_length: int = 100
    learning_rate: float = 5e-4
    adam_epsilon: float = 1e-4
    grad_clip: float = 100.0
    beta_anneal_iters: int = 10000
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("total_iters", "batch_size", "sequence_length", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0 or self.grad_clip <= 0:
            raise ContractViolation("learning_rate, adam_epsilon, grad_clip must be > 0")
        if self.beta_anneal_iters < 0:
            raise ContractViolation("beta_anneal_iters must be >= 0")
        if self.seed < 0:
            raise ContractViolation("seed must be >= 0")


def beta_schedule(iteration: int, anneal_iters: int) -> float:
    """Linear 0 to 1 over ``anneal_iters`` iterations, then flat at 1."""
    if iteration < 0:
        raise ContractViolation("iteration must be >= 0")
    if anneal_iters < 0:
        raise ContractViolation("anneal_iters must be >= 0")
    if anneal_iters == 0:
        return 1.0
    return min(1.0, iteration / anneal_iters)


def assemble_loss(step_terms: Sequence[ElboTerms], beta: float) -> torch.Tensor:
    """Negative ELBO, averaged over the batch. Float64 scalar with gradients."""
    if not step_terms:
        raise ContractViolation("no step terms")
    if not 0.0 <= beta <= 1.0:
        raise ContractViolation(f"beta must lie in [0, 1], got {beta}")
    recon = torch.stack([t.recon_loglik for t in step_terms]).sum(dim=0)
    kl_state = torch.stack([t.kl_state.sum(dim=-1) for t in step_terms]).sum(dim=0)
    kl_ind = torch.stack([t.kl_indicator.sum(dim=-1) for t in step_terms]).sum(dim=0)
    return (-recon + beta * (kl_state + kl_ind)).mean()


def sequence_elbo(step_terms: Sequence[ElboTerms]) -> torch.Tensor:
    """Per-sequence evidence lower bound (beta = 1), float64 [B]."""
    recon = torch.stack([t.recon_loglik for t in step_terms]).sum(dim=0)
    kl_state = torch.stack([t.kl_state.sum(dim=-1) for t in step_terms]).sum(dim=0)
    kl_ind = torch.stack([t.kl_indicator.sum(dim=-1) for t in step_terms]).sum(dim=0)
    return recon - kl_state - kl_ind


def sequence_log_weight(step_terms: Sequence[ElboTerms]) -> torch.Tensor:
    """Single-sample stochastic bound term, float64 [B].

    log w = sum_t [ recon_t + (log p(s) - log q(s)) + log p(e_selected) ];
    its expectation is the ELBO and logsumexp over k draws minus log k gives
    the importance-weighted bound.
    """
    recon = torch.stack([t.recon_loglik for t in step_terms]).sum(dim=0)
    ratio = torch.stack([t.sample_logratio for t in step_terms]).sum(dim=0)
    kl_ind = torch.stack([t.kl_indicator.sum(dim=-1) for t in step_terms]).sum(dim=0)
    return recon + ratio - kl_ind


def iwae_bound(
    model: HierarchyModel,
    frames: torch.Tensor,
    k: int,
    generator: torch.Generator,
) -> torch.Tensor:
    """Importance-weighted bound with k filtered samples, float64 [B]."""
    if k < 1:
        raise ContractViolation("k must be >= 1")
    with torch.no_grad():
        weights = []
        for _ in range(k):
            result = filter_sequence(model, frames, generator)
            weights.append(sequence_log_weight(result.step_terms))
        lw = torch.stack(weights)  # [k, B]
    return torch.logsumexp(lw, dim=0) - math.log(k)


class SequenceSampler(Protocol):
    def sample(self, batch: int, length: int) -> np.ndarray: ...

    def state_dict(self) -> dict: ...

    def load_state_dict(self, state: dict) -> None: ...


def metrics_header(num_levels: int) -> list[str]:
    cols = ["iter", "loss", "recon_nats"]
    cols += [f"kl_state_L{n}" for n in range(1, num_levels + 1)]
    cols += [f"kl_ind_L{n}" for n in range(1, num_levels + 1)]
    cols += ["mean_depth", "beta", "wallclock_s"]
    return cols


def summarize_iteration(result: FilterResult, beta: float) -> dict:
    """Scalar training diagnostics for one batch; KLs are per-sequence sums."""
    terms = result.step_terms
    with torch.no_grad():
        recon = torch.stack([t.recon_loglik for t in terms]).sum(dim=0).mean()
        kl_state = (
            torch.stack([t.kl_state for t in terms]).sum(dim=0).mean(dim=0)
        )
        kl_ind = (
            torch.stack([t.kl_indicator for t in terms]).sum(dim=0).mean(dim=0)
        )
    depth = float(result.indicators.sum(axis=-1).mean())
    return {
        "recon_nats": float(-recon),
        "kl_state": [float(v) for v in kl_state],
        "kl_ind": [float(v) for v in kl_ind],
        "mean_depth": depth,
        "beta": float(beta),
    }


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({k: float(v) for k, v in row.items()})
        return rows


def train(
    model: HierarchyModel,
    cfg: TrainConfig,
    sampler: SequenceSampler,
    out_dir: str | Path,
    deterministic: bool = False,
    resume: Optional[dict] = None,
    log_fn=None,
) -> list[dict]:
    """Optimize ``model`` in place; writes metrics.csv and checkpoint.pt.

    ``resume`` takes the payload fields of a loaded checkpoint (iteration,
    optimizer_state, torch_rng, sampler_state) and continues the counter,
    appending to an existing metrics.csv. A non-finite loss aborts before
    the optimizer step so the last saved checkpoint stays valid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "checkpoint.pt"

    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, eps=cfg.adam_epsilon
    )
    gen = torch.Generator(device="cpu").manual_seed(cfg.seed)

    start_iter = 0
    if resume is not None:
        start_iter = int(resume["iteration"])
        if resume.get("optimizer_state") is not None:
            opt.load_state_dict(resume["optimizer_state"])
        if resume.get("torch_rng") is not None:
            gen.set_state(resume["torch_rng"])
        if resume.get("sampler_state") is not None:
            sampler.load_state_dict(resume["sampler_state"])

    header = metrics_header(model.config.num_levels)
    mode = "a" if (resume is not None and metrics_path.exists()) else "w"
    rows: list[dict] = []
    t0 = time.monotonic()

    def save(iteration: int) -> None:
        save_checkpoint(
            ckpt_path,
            model,
            optimizer=opt,
            iteration=iteration,
            torch_generator=gen,
            sampler_state=sampler.state_dict(),
            train_config=cfg,
        )

    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(header)
        for it in range(start_iter, cfg.total_iters):
            beta = beta_schedule(it, cfg.beta_anneal_iters)
            frames = sampler.sample(cfg.batch_size, cfg.sequence_length)
            batch = frames_to_tensor(frames).to(model.device)
            result = filter_sequence(model, batch, gen)
            loss = assemble_loss(result.step_terms, beta)
            summary = summarize_iteration(result, beta)
            wall = 0.0 if deterministic else time.monotonic() - t0
            row = {
                "iter": it,
                "loss": float(loss.detach()),
                "wallclock_s": wall,
                **summary,
            }
            rows.append(row)
            writer.writerow(_format_row(row, model.config.num_levels))
            fh.flush()
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it}; last checkpoint kept"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if log_fn is not None:
                log_fn(row)
            done = it + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.total_iters:
                save(done)
    return rows


def _format_row(row: dict, num_levels: int) -> list[str]:
    out = [str(row["iter"]), f"{row['loss']:.6f}", f"{row['recon_nats']:.6f}"]
    out += [f"{v:.6f}" for v in row["kl_state"]]
    out += [f"{v:.6f}" for v in row["kl_ind"]]
    out += [
        f"{row['mean_depth']:.6f}",
        f"{row['beta']:.6f}",
        f"{row['wallclock_s']:.3f}",
    ]
    return out
