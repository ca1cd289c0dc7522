"""Evaluation metrics, reports and ablations for trained hierarchies.

Image metrics operate on [0, 1] float frames (HWC or HW). Reports take raw
frame arrays, run filtering under no_grad, and reduce to plain numpy /
python structures ready for JSON or CSV serialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .distributions import ContractViolation
from .engine import (
    HierarchyState,
    filter_sequence,
    frames_to_tensor,
    open_loop_rollout,
)
from .networks import HierarchyModel

PSNR_CAP_DB = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against a unit dynamic range,
    capped at 100 dB so identical frames stay finite."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolation(
            f"shape mismatch: {pred.shape} vs {gt.shape}"
        )
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, -10.0 * math.log10(mse)))


def _ssim_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = np.arange(_SSIM_WINDOW) - half
    k = np.exp(-(coords**2) / (2.0 * _SSIM_SIGMA**2))
    w = np.outer(k, k)
    return w / w.sum()


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Structural similarity on the channel-mean grayscale image.

    Gaussian 11x11 window (sigma 1.5), valid-mode windows only, unit
    dynamic range constants K1=0.01, K2=0.03.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 3:
        pred = pred.mean(axis=-1)
        gt = gt.mean(axis=-1)
    if pred.ndim != 2:
        raise ContractViolation("expected HW or HWC frames")
    if min(pred.shape) < _SSIM_WINDOW:
        raise ContractViolation(
            f"frame {pred.shape} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    w = _ssim_window()
    mu1 = convolve2d(pred, w, mode="valid")
    mu2 = convolve2d(gt, w, mode="valid")
    s11 = convolve2d(pred * pred, w, mode="valid") - mu1**2
    s22 = convolve2d(gt * gt, w, mode="valid") - mu2**2
    s12 = convolve2d(pred * gt, w, mode="valid") - mu1 * mu2
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1**2 + mu2**2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def mean_depth(indicators: np.ndarray) -> float:
    """Average number of changing levels per step.

    Accepts [T, N] or [T, B, N] binary arrays; the result lives in
    [1, N] because the bottom level always changes.
    """
    ind = np.asarray(indicators)
    if ind.ndim not in (2, 3):
        raise ContractViolation("expected [T, N] or [T, B, N] indicators")
    if not np.isin(ind, (0, 1)).all():
        raise ContractViolation("indicators must be binary")
    return float(ind.sum(axis=-1).mean())


@dataclass
class KlReport:
    state: np.ndarray  # [N] nats per sequence (summed over time, mean over clips)
    indicator: np.ndarray  # [N]
    combined: np.ndarray  # [N]
    state_per_step: np.ndarray  # [N] same totals divided by step count
    indicator_per_step: np.ndarray
    combined_per_step: np.ndarray
    num_sequences: int
    num_steps: int


def _filter_batches(
    model: HierarchyModel,
    frames: np.ndarray,
    seed: int,
    batch_size: int = 16,
):
    """Yield FilterResult per batch under no_grad, one shared generator."""
    gen = torch.Generator(device="cpu").manual_seed(seed)
    M = frames.shape[0]
    with torch.no_grad():
        for start in range(0, M, batch_size):
            clip = frames_to_tensor(frames[start : start + batch_size]).to(
                model.device
            )
            yield filter_sequence(model, clip, gen)


def kl_per_level_report(
    model: HierarchyModel, frames: np.ndarray, seed: int = 0, batch_size: int = 16
) -> KlReport:
    """Mean KL cost of each level over a set of sequences.

    Headline numbers are per sequence (summed over time, averaged over
    clips), the same units the training log uses; per-step means divide the
    same totals by the step count. ``combined`` is state plus indicator
    cost; that is the quantity whose profile collapses toward zero at
    unused top levels.
    """
    if frames.ndim != 5:
        raise ContractViolation("expected frames [M, T, H, W, C]")
    N = model.config.num_levels
    state_sum = np.zeros(N)
    ind_sum = np.zeros(N)
    total_steps = 0
    for result in _filter_batches(model, frames, seed, batch_size):
        for terms in result.step_terms:
            state_sum += terms.kl_state.sum(dim=0).cpu().numpy()
            ind_sum += terms.kl_indicator.sum(dim=0).cpu().numpy()
            total_steps += terms.kl_state.shape[0]
    M = int(frames.shape[0])
    state = state_sum / M
    ind = ind_sum / M
    return KlReport(
        state=state,
        indicator=ind,
        combined=state + ind,
        state_per_step=state_sum / total_steps,
        indicator_per_step=ind_sum / total_steps,
        combined_per_step=(state_sum + ind_sum) / total_steps,
        num_sequences=M,
        num_steps=int(frames.shape[1]),
    )


def prior_change_report(
    model: HierarchyModel,
    datasets: Mapping[float, np.ndarray],
    level: int = 2,
    seed: int = 0,
    batch_size: int = 16,
) -> list[dict]:
    """Bucket the factor head's change probability by what inference chose.

    For each dataset (keyed by its switch rate) the probabilities
    p(e_level = 1 | d) are split by the inferred indicator at that step,
    the forced first frame included (on switch-free data it is the change
    bucket's main population). Rows are dicts with lambda, condition,
    mean_p, stderr, count.
    """
    if model.config.num_levels < level:
        raise ContractViolation(
            f"model has {model.config.num_levels} levels, need level {level}"
        )
    li = level - 1
    rows = []
    for lam in sorted(datasets):
        frames = datasets[lam]
        probs: list[np.ndarray] = []
        chosen: list[np.ndarray] = []
        for result in _filter_batches(model, frames, seed, batch_size):
            probs.append(result.factor_p[:, :, li].reshape(-1))
            chosen.append(result.indicators[:, :, li].reshape(-1))
        p = np.concatenate(probs)
        e = np.concatenate(chosen)
        for condition, mask in (("change", e == 1), ("static", e == 0)):
            vals = p[mask]
            if vals.size == 0:
                continue
            stderr = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            rows.append(
                {
                    "lambda": float(lam),
                    "condition": condition,
                    "mean_p": float(vals.mean()),
                    "stderr": stderr,
                    "count": int(vals.size),
                }
            )
    return rows


@dataclass
class BestOfK:
    scores: np.ndarray  # [k] sequence-level score of each rollout
    best_index: int
    best_frames: np.ndarray  # [T, H, W, C] clipped to [0, 1]
    per_frame_ssim: np.ndarray  # [T]
    per_frame_psnr: np.ndarray  # [T]
    indicators: np.ndarray  # [T, N] of the best rollout


def best_of_k(
    model: HierarchyModel,
    context: np.ndarray,
    future: np.ndarray,
    k: int = 100,
    metric: str = "ssim",
    seed: int = 0,
    indicator_mode: str = "sample",
) -> BestOfK:
    """Filter the context once, then score k independent rollouts.

    Rollout i derives its generator from seed + 1 + i, so the sample set
    for k is a strict superset of the one for k' < k and the best score is
    monotone in k.
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    if metric not in ("ssim", "psnr"):
        raise ContractViolation(f"unknown metric {metric!r}")
    if context.ndim != 4 or future.ndim != 4:
        raise ContractViolation("context and future must be [T, H, W, C]")
    horizon = future.shape[0]
    gen = torch.Generator(device="cpu").manual_seed(seed)
    with torch.no_grad():
        clip = frames_to_tensor(context[None]).to(model.device)
        state = filter_sequence(model, clip, gen).final_state

    score_fn = ssim if metric == "ssim" else psnr
    scores = np.zeros(k)
    best: Optional[dict] = None
    for i in range(k):
        gen_i = torch.Generator(device="cpu").manual_seed(seed + 1 + i)
        trace = open_loop_rollout(
            model, state, horizon, gen_i, indicator_mode=indicator_mode
        )
        frames = np.clip(trace.frames[:, 0], 0.0, 1.0)
        per_frame = np.array(
            [score_fn(frames[t], future[t]) for t in range(horizon)]
        )
        scores[i] = float(per_frame.mean())
        if best is None or scores[i] > best["score"]:
            best = {
                "score": scores[i],
                "frames": frames,
                "indicators": trace.indicators[:, 0],
            }
    frames = best["frames"]
    return BestOfK(
        scores=scores,
        best_index=int(np.argmax(scores)),
        best_frames=frames,
        per_frame_ssim=np.array(
            [ssim(frames[t], future[t]) for t in range(horizon)]
        ),
        per_frame_psnr=np.array(
            [psnr(frames[t], future[t]) for t in range(horizon)]
        ),
        indicators=best["indicators"],
    )


@dataclass
class AblationResult:
    frames: np.ndarray  # [count, H, W, C], clipped
    pixel_variance: np.ndarray  # [H, W] across the draw set
    mean_variance: float
    sampled_levels: tuple[int, ...]


def level_sampling_ablation(
    model: HierarchyModel,
    state: HierarchyState,
    sampled_levels: Sequence[int],
    count: int = 16,
    seed: int = 0,
) -> AblationResult:
    """Decode a batch of frames, resampling only the chosen levels.

    Levels in ``sampled_levels`` draw from their change prior at the current
    state; every other level is pinned to its carried posterior mean. A
    level whose code carries content spreads the draws (high pixel
    variance); a collapsed level leaves the decode glued to the posterior.
    """
    N = model.config.num_levels
    levels = set(int(v) for v in sampled_levels)
    if not levels.issubset(range(1, N + 1)):
        raise ContractViolation(f"sampled_levels {levels} outside 1..{N}")
    if state.batch != 1:
        raise ContractViolation("ablation expects a single-sequence state")
    if count < 2:
        raise ContractViolation("need at least 2 draws for a variance")
    gen = torch.Generator(device="cpu").manual_seed(seed)
    # one decode per draw: batched linear kernels round identical rows of one
    # batch differently, which would leak fake variance into the all-fixed case
    images = []
    with torch.no_grad():
        for _ in range(count):
            ctx = model.top_context_for(1)
            image = None
            for i in range(N - 1, -1, -1):
                lvl = state.levels[i]
                if (i + 1) in levels:
                    prior = model.prior_state_head(i + 1, lvl.d, ctx)
                    noise = torch.randn(
                        1,
                        model.config.latent_dim,
                        generator=gen,
                        device=model.device,
                        dtype=model.dtype,
                    )
                    s = prior.mean + prior.std * noise
                else:
                    s = lvl.posterior.mean
                if i > 0:
                    ctx = model.decode(i + 1, s, ctx)
                else:
                    image = model.decode(1, s, ctx)
            images.append(image[0])
    frames = np.clip(
        np.moveaxis(torch.stack(images).cpu().numpy(), 1, -1).astype(np.float32),
        0.0,
        1.0,
    )
    # float64 keeps the variance of bitwise-identical draws at exactly zero
    pixel_var = frames.astype(np.float64).var(axis=0).mean(axis=-1)
    return AblationResult(
        frames=frames,
        pixel_variance=pixel_var,
        mean_variance=float(pixel_var.mean()),
        sampled_levels=tuple(sorted(levels)),
    )


@dataclass
class SwitchEvent:
    t: int
    color_before: int
    color_after: int
    purity_before: float
    purity_after: float
    sharp: bool


def _frame_color_stats(
    frame: np.ndarray, palette: np.ndarray, ball_threshold: float
) -> tuple[Optional[int], float]:
    """(modal palette index, purity of the modal color) for the ball pixels."""
    bright = frame.max(axis=-1)
    mask = bright >= ball_threshold
    if mask.sum() < 4:
        return None, 0.0
    pix = frame[mask]  # [P, 3]
    dists = ((pix[:, None, :] - palette[None, :, :]) ** 2).sum(axis=-1)
    nearest = dists.argmin(axis=1)
    counts = np.bincount(nearest, minlength=palette.shape[0])
    modal = int(counts.argmax())
    purity = float(counts[modal] / counts.sum())
    return modal, purity


def color_switch_sharpness(
    frames: np.ndarray,
    palette: Sequence[tuple[int, int, int]],
    ball_threshold: float = 0.25,
    purity_threshold: float = 0.9,
) -> list[SwitchEvent]:
    """Detect modal-color changes and judge whether they are clean.

    A switch at t is *sharp* when the ball pixels on both adjacent frames
    are at least ``purity_threshold`` pure in their modal palette color; a
    muddy blend of two colors fails. Frames with too few bright pixels are
    treated as ball-less and cannot anchor a switch. Returns [] for empty
    or switch-free input.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        return []
    if frames.ndim != 4:
        raise ContractViolation("expected frames [T, H, W, C]")
    pal = np.asarray(palette, dtype=np.float64) / 255.0
    stats = [
        _frame_color_stats(frames[t], pal, ball_threshold)
        for t in range(frames.shape[0])
    ]
    events: list[SwitchEvent] = []
    for t in range(1, frames.shape[0]):
        prev_color, prev_purity = stats[t - 1]
        cur_color, cur_purity = stats[t]
        if prev_color is None or cur_color is None or prev_color == cur_color:
            continue
        events.append(
            SwitchEvent(
                t=t,
                color_before=prev_color,
                color_after=cur_color,
                purity_before=prev_purity,
                purity_after=cur_purity,
                sharp=bool(
                    prev_purity >= purity_threshold
                    and cur_purity >= purity_threshold
                ),
            )
        )
    return events


@dataclass
class EvalReport:
    per_frame: list[dict]  # rows {t, ssim, psnr} averaged over sequences
    mean_ssim: float
    mean_psnr: float
    mean_depth: float
    kl_per_level: list[float]
    prior_table: list[dict]
    num_sequences: int
    context: int
    horizon: int
    k: int


def run_evaluation(
    model: HierarchyModel,
    frames: np.ndarray,
    lambda_value: float,
    context: int = 30,
    horizon: Optional[int] = None,
    k: int = 100,
    seed: int = 0,
    metric: str = "ssim",
) -> EvalReport:
    """Best-of-k prediction quality plus filtering diagnostics on a dataset.

    ``frames`` is [M, T, H, W, C]; each sequence contributes one best-of-k
    rollout scored frame-by-frame against its ground-truth continuation.
    """
    if frames.ndim != 5:
        raise ContractViolation("expected frames [M, T, H, W, C]")
    M, T = frames.shape[:2]
    if not 1 <= context < T:
        raise ContractViolation(
            f"context {context} must leave at least one future frame of {T}"
        )
    if horizon is None:
        horizon = T - context
    if horizon < 1 or context + horizon > T:
        raise ContractViolation(
            f"horizon {horizon} with context {context} exceeds length {T}"
        )
    ssim_curves = np.zeros((M, horizon))
    psnr_curves = np.zeros((M, horizon))
    for m in range(M):
        result = best_of_k(
            model,
            frames[m, :context],
            frames[m, context : context + horizon],
            k=k,
            metric=metric,
            seed=seed + 1000 * m,
        )
        ssim_curves[m] = result.per_frame_ssim
        psnr_curves[m] = result.per_frame_psnr

    depth_vals = []
    for result in _filter_batches(model, frames, seed):
        depth_vals.append(mean_depth(result.indicators))
    kl = kl_per_level_report(model, frames, seed=seed)
    prior_rows = (
        prior_change_report(model, {lambda_value: frames}, seed=seed)
        if model.config.num_levels >= 2
        else []
    )
    per_frame = [
        {
            "t": t,
            "ssim": float(ssim_curves[:, t].mean()),
            "psnr": float(psnr_curves[:, t].mean()),
        }
        for t in range(horizon)
    ]
    return EvalReport(
        per_frame=per_frame,
        mean_ssim=float(ssim_curves.mean()),
        mean_psnr=float(psnr_curves.mean()),
        mean_depth=float(np.mean(depth_vals)),
        kl_per_level=[float(v) for v in kl.combined],
        prior_table=prior_rows,
        num_sequences=M,
        context=context,
        horizon=horizon,
        k=k,
    )
