"""Filtering and generation for the hierarchy.

One filtering step over a batch of sequences runs in two sweeps
(per row of the batch, independently):

ascent
    Climb from level 2 upward using contexts decoded from the carried
    posterior means. At each level infer a provisional posterior, compare
    its KL against the change prior and against the carried (static) belief,
    and stop at the first level that prefers static. That level is the
    *blocking level* K for the step; everything above it is untouched.
    The comparison is hard and carries no gradients.

descent
    Walk back down from the top. Levels n >= K are frozen: belief, sample
    and temporal track are carried bitwise, and their state KL is zero
    identically (the posterior of a static level *is* the carried belief),
    so nothing is evaluated for them. Changed levels n < K infer fresh
    posteriors conditioned on contexts decoded from the actual samples
    (held above, fresh below), draw new samples, and pay KL against their
    change prior. Every level pays an indicator term, the surprisal of its
    selected indicator under the factor prior.

Temporal tracks d^n advance only for the changed levels (n < K), each
consuming its fresh sample; a frozen level keeps d bitwise, so its factor
head sees the world exactly as it was at the last change and emits a
constant hazard until the next one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .distributions import (
    BernoulliBelief,
    ContractViolation,
    GaussianBelief,
    belief_log_density,
    gaussian_log_density,
    kl_bernoulli,
    kl_diag_gaussian,
    reparam_sample,
)
from .mixture import TemporalMixturePrior, select_component
from .networks import HierarchyModel

# Frame encodes are batched over time in chunks to cap transient memory.
_ENCODE_CHUNK = 1024


@dataclass
class LevelState:
    """Belief, last used sample, temporal track and last indicator for one level."""

    posterior: GaussianBelief
    sample: torch.Tensor
    d: torch.Tensor
    e: torch.Tensor  # [B] float, last step's indicator

    def detach(self) -> "LevelState":
        return LevelState(
            self.posterior.detach(),
            self.sample.detach(),
            self.d.detach(),
            self.e.detach(),
        )


@dataclass
class HierarchyState:
    """Filtering state after assimilating ``t`` frames.

    ``blocking`` holds, per batch row, the 1-based blocking level of the
    most recent step (num_levels + 1 when every level changed). ``factor_p``
    holds the change probabilities the factor heads assigned before that
    step, detached, for diagnostics.
    """

    levels: list[LevelState]
    t: int
    blocking: torch.Tensor
    factor_p: torch.Tensor

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def batch(self) -> int:
        return self.levels[0].d.shape[0]

    def indicators(self) -> np.ndarray:
        """Last step's indicators as int8 [batch, num_levels], bottom first."""
        e = torch.stack([lvl.e for lvl in self.levels], dim=-1)
        return e.detach().cpu().numpy().astype(np.int8)

    def detach(self) -> "HierarchyState":
        return HierarchyState(
            [lvl.detach() for lvl in self.levels],
            self.t,
            self.blocking.detach(),
            self.factor_p.detach(),
        )


@dataclass
class ElboTerms:
    """Per-sequence step terms, float64: recon [B], KLs [B, num_levels].

    sample_logratio is the stochastic counterpart of -kl_state for this
    step's draws: sum over freshly inferred levels of
    log p_selected(s) - log q(s). Its expectation over the reparameterised
    noise is -kl_state.sum(-1); it feeds importance-weighted bounds.
    """

    recon_loglik: torch.Tensor
    kl_state: torch.Tensor
    kl_indicator: torch.Tensor
    sample_logratio: torch.Tensor


@dataclass
class FilterResult:
    """Everything filter_sequence accumulates over a clip."""

    final_state: HierarchyState
    step_terms: list[ElboTerms]
    indicators: np.ndarray  # [T, B, N] int8
    blocking: np.ndarray  # [T, B] int64
    factor_p: np.ndarray  # [T, B, N] float64


@dataclass
class RolloutTrace:
    """Open-loop generation record.

    frames are raw decoder means (not clipped), [T, B, H, W, C] float32.
    kl_state holds KL(change prior || carried belief) for levels that moved,
    zero elsewhere; kl_indicator holds the surprisal of the sampled
    indicator under the factor prior.
    """

    frames: np.ndarray
    indicators: np.ndarray
    blocking: np.ndarray
    factor_p: np.ndarray
    kl_state: np.ndarray
    kl_indicator: np.ndarray
    final_state: HierarchyState


class InstrumentationLog:
    """Records which rows had their posterior head evaluated, per step/level.

    Exists so tests can assert that frozen levels are skipped rather than
    recomputed and discarded.
    """

    def __init__(self):
        self.events: list[tuple[int, str, int, np.ndarray]] = []

    def record(self, t: int, phase: str, level: int, rows: torch.Tensor) -> None:
        self.events.append(
            (t, phase, level, rows.detach().cpu().numpy().astype(np.int64))
        )

    def levels_evaluated(self, t: int, row: int) -> set[int]:
        out = set()
        for et, _, level, rows in self.events:
            if et == t and row in rows:
                out.add(level)
        return out


def frames_to_tensor(
    frames: np.ndarray, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """[..., H, W, C] numpy frames to [..., C, H, W] torch."""
    arr = np.ascontiguousarray(np.moveaxis(np.asarray(frames), -1, -3))
    return torch.from_numpy(arr).to(dtype)


def tensor_to_frames(t: torch.Tensor) -> np.ndarray:
    """[..., C, H, W] torch to [..., H, W, C] float32 numpy."""
    arr = t.detach().cpu().numpy()
    return np.ascontiguousarray(np.moveaxis(arr, -3, -1)).astype(np.float32)


def _check_frame_batch(model: HierarchyModel, frame: torch.Tensor) -> int:
    h, w, c = model.config.frame_shape
    if frame.dim() != 4 or frame.shape[1:] != (c, h, w):
        raise ContractViolation(
            f"expected frame batch [B, {c}, {h}, {w}], got {tuple(frame.shape)}"
        )
    return frame.shape[0]


def _noise(
    model: HierarchyModel, batch: int, generator: torch.Generator
) -> torch.Tensor:
    return torch.randn(
        batch,
        model.config.latent_dim,
        generator=generator,
        device=model.device,
        dtype=model.dtype,
    )


def init_state(
    model: HierarchyModel,
    frame: torch.Tensor,
    generator: torch.Generator,
    instrument: Optional[InstrumentationLog] = None,
    features: Optional[list[torch.Tensor]] = None,
) -> tuple[HierarchyState, ElboTerms]:
    """Assimilate the first frame: every level changes, priors come from
    zeroed temporal tracks, and the KL terms compare against the change
    prior only."""
    cfg = model.config
    N = cfg.num_levels
    B = _check_frame_batch(model, frame)
    xs = features if features is not None else model.encode(frame)
    d0 = model.initial_d(B)
    factor = [model.prior_factor_head(i + 1, d0) for i in range(N)]

    e = torch.ones(B, N, device=model.device, dtype=model.dtype)
    kl_state = torch.zeros(B, N, dtype=torch.float64, device=model.device)
    kl_ind = torch.zeros(B, N, dtype=torch.float64, device=model.device)
    logratio = torch.zeros(B, dtype=torch.float64, device=model.device)

    ctx: list[Optional[torch.Tensor]] = [None] * N
    ctx[N - 1] = model.top_context_for(B)
    new_levels: list[Optional[LevelState]] = [None] * N
    image_mean = None
    for i in range(N - 1, -1, -1):
        q = model.posterior_head(i + 1, xs[i], ctx[i])
        if instrument is not None:
            instrument.record(1, "descent", i + 1, torch.arange(B))
        noise = _noise(model, B, generator)
        s = reparam_sample(q, noise)
        change = model.prior_state_head(i + 1, d0, ctx[i])
        kl_state[:, i] = kl_diag_gaussian(q, change)
        kl_ind[:, i] = kl_bernoulli(BernoulliBelief(e[:, i]), factor[i])
        logratio = logratio + belief_log_density(s, change) - belief_log_density(s, q)
        if i > 0:
            ctx[i - 1] = model.decode(i + 1, s, ctx[i])
        else:
            image_mean = model.decode(1, s, ctx[0])
        d_new = model.temporal_step(i + 1, s, d0)
        new_levels[i] = LevelState(q, s, d_new, e[:, i])

    recon = gaussian_log_density(frame, image_mean, cfg.obs_std, batch_dims=1)
    state = HierarchyState(
        levels=new_levels,
        t=1,
        blocking=torch.full((B,), N + 1, dtype=torch.long, device=model.device),
        factor_p=torch.stack([f.p_one.detach().double() for f in factor], dim=-1),
    )
    return state, ElboTerms(recon, kl_state, kl_ind, logratio)


def filter_step(
    model: HierarchyModel,
    state: HierarchyState,
    frame: torch.Tensor,
    generator: torch.Generator,
    instrument: Optional[InstrumentationLog] = None,
    features: Optional[list[torch.Tensor]] = None,
) -> tuple[HierarchyState, ElboTerms]:
    """Assimilate one frame into ``state``. See the module docstring for the
    two-sweep structure."""
    cfg = model.config
    N = cfg.num_levels
    B = _check_frame_batch(model, frame)
    if state.batch != B:
        raise ContractViolation(f"state batch {state.batch} != frame batch {B}")
    t = state.t + 1
    xs = features if features is not None else model.encode(frame)
    factor = [model.prior_factor_head(i + 1, state.levels[i].d) for i in range(N)]

    e = torch.zeros(B, N, device=model.device, dtype=model.dtype)
    e[:, 0] = 1.0
    blocking = torch.full((B,), N + 1, dtype=torch.long, device=model.device)

    # Ascent. Hard selection, no gradients; contexts from carried means.
    with torch.no_grad():
        ctx_up: list[Optional[torch.Tensor]] = [None] * N
        ctx_up[N - 1] = model.top_context_for(B)
        for i in range(N - 1, 0, -1):
            ctx_up[i - 1] = model.decode(
                i + 1, state.levels[i].posterior.mean, ctx_up[i]
            )
        active = torch.ones(B, dtype=torch.bool, device=model.device)
        for i in range(1, N):
            rows = torch.nonzero(active, as_tuple=False).squeeze(-1)
            if rows.numel() == 0:
                break
            lvl = state.levels[i]
            q_prov = model.posterior_head(i + 1, xs[i][rows], ctx_up[i][rows])
            if instrument is not None:
                instrument.record(t, "ascent", i + 1, rows)
            prior = TemporalMixturePrior(
                static=lvl.posterior[rows],
                change=model.prior_state_head(i + 1, lvl.d[rows], ctx_up[i][rows]),
                indicator=factor[i][rows],
            )
            sel = select_component(q_prov, prior)
            e[rows, i] = sel.to(e.dtype)
            stopped = rows[sel == 0]
            blocking[stopped] = i + 1
            active[stopped] = False

    # Descent. Fresh inference for changed levels only; frozen levels (the
    # blocking level and everything past it) keep posterior, sample and d
    # bitwise and contribute zero kl_state and zero logratio identically, so
    # both are skipped rather than evaluated.
    kl_state = torch.zeros(B, N, dtype=torch.float64, device=model.device)
    kl_ind = torch.zeros(B, N, dtype=torch.float64, device=model.device)
    logratio = torch.zeros(B, dtype=torch.float64, device=model.device)
    ctx: list[Optional[torch.Tensor]] = [None] * N
    ctx[N - 1] = model.top_context_for(B)
    new_params: list[Optional[tuple]] = [None] * N
    image_mean = None
    for i in range(N - 1, -1, -1):
        lvl = state.levels[i]
        fresh = blocking > (i + 1)
        rows = torch.nonzero(fresh, as_tuple=False).squeeze(-1)
        mean = lvl.posterior.mean.clone()
        std = lvl.posterior.std.clone()
        smp = lvl.sample.clone()
        noise = _noise(model, B, generator)
        if rows.numel():
            q = model.posterior_head(i + 1, xs[i][rows], ctx[i][rows])
            if instrument is not None:
                instrument.record(t, "descent", i + 1, rows)
            s_new = reparam_sample(q, noise[rows])
            mean[rows] = q.mean
            std[rows] = q.std
            smp[rows] = s_new
            prior_chg = model.prior_state_head(i + 1, lvl.d[rows], ctx[i][rows])
            kl_state[rows, i] = kl_diag_gaussian(q, prior_chg)
            logratio[rows] = (
                logratio[rows]
                + belief_log_density(s_new, prior_chg)
                - belief_log_density(s_new, q)
            )
        if i > 0:
            ctx[i - 1] = model.decode(i + 1, smp, ctx[i])
        else:
            image_mean = model.decode(1, smp, ctx[0])
        new_params[i] = (mean, std, smp)

    recon = gaussian_log_density(frame, image_mean, cfg.obs_std, batch_dims=1)
    for i in range(N):
        kl_ind[:, i] = kl_bernoulli(BernoulliBelief(e[:, i]), factor[i])

    # d advances only where the level changed; a frozen level has no new
    # sample to feed its temporal cell.
    new_levels: list[Optional[LevelState]] = [None] * N
    for i in range(N):
        mean, std, smp = new_params[i]
        lvl = state.levels[i]
        upd = blocking > (i + 1)
        rows = torch.nonzero(upd, as_tuple=False).squeeze(-1)
        d_new = lvl.d.clone()
        if rows.numel():
            d_new[rows] = model.temporal_step(i + 1, smp[rows], lvl.d[rows])
        new_levels[i] = LevelState(GaussianBelief(mean, std), smp, d_new, e[:, i])

    state_new = HierarchyState(
        levels=new_levels,
        t=t,
        blocking=blocking,
        factor_p=torch.stack([f.p_one.detach().double() for f in factor], dim=-1),
    )
    return state_new, ElboTerms(recon, kl_state, kl_ind, logratio)


def encode_sequence(
    model: HierarchyModel, frames: torch.Tensor
) -> list[torch.Tensor]:
    """Encode [B, T, C, H, W] in time-batched chunks; returns [B, T, D] per level."""
    B, T = frames.shape[:2]
    flat = frames.reshape(B * T, *frames.shape[2:])
    parts: list[list[torch.Tensor]] = []
    for start in range(0, flat.shape[0], _ENCODE_CHUNK):
        parts.append(model.encode(flat[start : start + _ENCODE_CHUNK]))
    xs = [torch.cat([p[i] for p in parts], dim=0) for i in range(model.config.num_levels)]
    return [x.reshape(B, T, -1) for x in xs]


def filter_sequence(
    model: HierarchyModel,
    frames: torch.Tensor,
    generator: torch.Generator,
    instrument: Optional[InstrumentationLog] = None,
) -> FilterResult:
    """Filter a clip [B, T, C, H, W]. A single frame reduces to init_state."""
    if frames.dim() != 5:
        raise ContractViolation(
            f"expected frames [B, T, C, H, W], got {tuple(frames.shape)}"
        )
    B, T = frames.shape[:2]
    if T < 1:
        raise ContractViolation("need at least one frame")
    xs_all = encode_sequence(model, frames)

    def feats(ti: int) -> list[torch.Tensor]:
        return [x[:, ti] for x in xs_all]

    state, terms = init_state(
        model, frames[:, 0], generator, instrument, features=feats(0)
    )
    step_terms = [terms]
    indicators = [state.indicators()]
    blocking = [state.blocking.cpu().numpy().copy()]
    factor_p = [state.factor_p.cpu().numpy().copy()]
    for ti in range(1, T):
        state, terms = filter_step(
            model, state, frames[:, ti], generator, instrument, features=feats(ti)
        )
        step_terms.append(terms)
        indicators.append(state.indicators())
        blocking.append(state.blocking.cpu().numpy().copy())
        factor_p.append(state.factor_p.cpu().numpy().copy())
    return FilterResult(
        final_state=state,
        step_terms=step_terms,
        indicators=np.stack(indicators),
        blocking=np.stack(blocking),
        factor_p=np.stack(factor_p),
    )


def open_loop_rollout(
    model: HierarchyModel,
    state: HierarchyState,
    horizon: int,
    generator: torch.Generator,
    indicator_mode: str = "sample",
) -> RolloutTrace:
    """Generate ``horizon`` frames from ``state`` without observations.

    Indicators come from the factor priors (sampled, or thresholded at 0.5
    with ``indicator_mode="argmax"``), the nested ordering is enforced, and
    changing levels adopt their change prior as the new belief while static
    levels hold belief, sample and temporal track bitwise. Frames are
    decoder means.
    """
    if horizon < 1:
        raise ContractViolation("horizon must be >= 1")
    if indicator_mode not in ("sample", "argmax"):
        raise ContractViolation(f"unknown indicator_mode {indicator_mode!r}")
    cfg = model.config
    N = cfg.num_levels
    B = state.batch
    h, w, c = cfg.frame_shape

    frames = np.zeros((horizon, B, h, w, c), dtype=np.float32)
    inds = np.zeros((horizon, B, N), dtype=np.int8)
    blocks = np.zeros((horizon, B), dtype=np.int64)
    factor_arr = np.zeros((horizon, B, N), dtype=np.float64)
    kl_s = np.zeros((horizon, B, N), dtype=np.float64)
    kl_e = np.zeros((horizon, B, N), dtype=np.float64)

    with torch.no_grad():
        levels = [lvl.detach() for lvl in state.levels]
        for step in range(horizon):
            factor = [model.prior_factor_head(i + 1, levels[i].d) for i in range(N)]
            e = torch.zeros(B, N, device=model.device, dtype=model.dtype)
            e[:, 0] = 1.0
            for i in range(1, N):
                p1 = factor[i].p_one
                if indicator_mode == "sample":
                    u = torch.rand(
                        B, generator=generator, device=model.device, dtype=model.dtype
                    )
                    raw = (u < p1).to(e.dtype)
                else:
                    raw = (p1 > 0.5).to(e.dtype)
                e[:, i] = raw * e[:, i - 1]
            blocking = e.sum(dim=1).long() + 1

            ctx: list[Optional[torch.Tensor]] = [None] * N
            ctx[N - 1] = model.top_context_for(B)
            new_levels: list[Optional[LevelState]] = [None] * N
            image_mean = None
            samples: list[Optional[torch.Tensor]] = [None] * N
            for i in range(N - 1, -1, -1):
                lvl = levels[i]
                upd = e[:, i] > 0.5
                rows = torch.nonzero(upd, as_tuple=False).squeeze(-1)
                mean = lvl.posterior.mean.clone()
                std = lvl.posterior.std.clone()
                smp = lvl.sample.clone()
                noise = _noise(model, B, generator)
                if rows.numel():
                    change = model.prior_state_head(i + 1, lvl.d[rows], ctx[i][rows])
                    smp[rows] = reparam_sample(change, noise[rows])
                    mean[rows] = change.mean
                    std[rows] = change.std
                    kl_s[step, rows.cpu().numpy(), i] = (
                        kl_diag_gaussian(change, lvl.posterior[rows]).cpu().numpy()
                    )
                kl_e[step, :, i] = (
                    kl_bernoulli(BernoulliBelief(e[:, i]), factor[i]).cpu().numpy()
                )
                if i > 0:
                    ctx[i - 1] = model.decode(i + 1, smp, ctx[i])
                else:
                    image_mean = model.decode(1, smp, ctx[0])
                samples[i] = smp
                new_levels[i] = LevelState(GaussianBelief(mean, std), smp, lvl.d, e[:, i])

            for i in range(N):
                upd = e[:, i] > 0.5
                rows = torch.nonzero(upd, as_tuple=False).squeeze(-1)
                d_new = levels[i].d.clone()
                if rows.numel():
                    d_new[rows] = model.temporal_step(
                        i + 1, samples[i][rows], levels[i].d[rows]
                    )
                new_levels[i].d = d_new

            frames[step] = tensor_to_frames(image_mean)
            inds[step] = e.cpu().numpy().astype(np.int8)
            blocks[step] = blocking.cpu().numpy()
            factor_arr[step] = (
                torch.stack([f.p_one.double() for f in factor], dim=-1).cpu().numpy()
            )
            levels = new_levels

        final_state = HierarchyState(
            levels=levels,
            t=state.t + horizon,
            blocking=torch.from_numpy(blocks[-1]).to(model.device),
            factor_p=torch.from_numpy(factor_arr[-1]).to(model.device),
        )
    return RolloutTrace(
        frames=frames,
        indicators=inds,
        blocking=blocks,
        factor_p=factor_arr,
        kl_state=kl_s,
        kl_indicator=kl_e,
        final_state=final_state,
    )
