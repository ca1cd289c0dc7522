"""Function approximators for the hierarchy.

One :class:`HierarchyModel` bundles, per level n (1-based, level 1 next to
the pixels):

- a frame encoder producing deterministic features x^1 (convolutional) and
  per-level feature MLPs x^n = f(x^{n-1}) for n >= 2,
- a decoder mapping (state sample, top-down context) to the context for the
  level below, with level 1 emitting the image mean (transposed convs),
- a GRU cell advancing the deterministic temporal track d^n,
- a posterior head q(s^n | x^n, c^n) and a change-prior head p(s^n | d^n, c^n),
  both diagonal Gaussians with softplus scales,
- a factor head p(e^n = 1 | d^n), a logistic over the change indicator.

The context above the top level is a learned constant vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .distributions import (
    PROB_EPS,
    STD_FLOOR,
    BernoulliBelief,
    ContractViolation,
    GaussianBelief,
)


class NonFiniteActivation(RuntimeError):
    """A network head produced NaN or Inf; names the offending head."""


@dataclass(frozen=True)
class ModelConfig:
    """Sizes and constants for a hierarchy stack.

    frame_shape is (height, width, channels); every conv stage halves the
    spatial extent, so height and width must be divisible by
    2 ** len(conv_channels).
    """

    num_levels: int = 2
    latent_dim: int = 20
    det_dim: int = 200
    frame_shape: tuple[int, int, int] = (32, 32, 3)
    obs_std: float = 0.3
    conv_channels: tuple[int, ...] = (32, 64, 128, 256)
    head_hidden: tuple[int, ...] = (40, 40, 40)
    enc_hidden: int = 200
    dec_hidden: int = 200
    factor_hidden: int = 200

    def __post_init__(self):
        if self.num_levels < 1:
            raise ContractViolation("num_levels must be >= 1")
        for name in ("latent_dim", "det_dim", "enc_hidden", "dec_hidden", "factor_hidden"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.obs_std <= 0:
            raise ContractViolation("obs_std must be strictly positive")
        if len(self.frame_shape) != 3 or any(v < 1 for v in self.frame_shape):
            raise ContractViolation("frame_shape must be (H, W, C) with positive entries")
        if not self.conv_channels:
            raise ContractViolation("conv_channels must be non-empty")
        if not self.head_hidden:
            raise ContractViolation("head_hidden must be non-empty")
        h, w, _ = self.frame_shape
        stride = 2 ** len(self.conv_channels)
        if h % stride or w % stride or h < stride or w < stride:
            raise ContractViolation(
                f"frame {h}x{w} must be divisible by the total conv stride {stride}"
            )


def _mlp(in_dim: int, hidden: Sequence[int], out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    last = in_dim
    for width in hidden:
        layers += [nn.Linear(last, width), nn.ELU()]
        last = width
    layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


class GaussianHead(nn.Module):
    """MLP emitting a diagonal Gaussian; scale via softplus plus a floor."""

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int):
        super().__init__()
        self.out_dim = out_dim
        self.net = _mlp(in_dim, hidden, 2 * out_dim)

    def forward(self, *inputs: torch.Tensor) -> GaussianBelief:
        h = torch.cat(inputs, dim=-1) if len(inputs) > 1 else inputs[0]
        raw = self.net(h)
        mean, raw_std = raw.split(self.out_dim, dim=-1)
        std = nn.functional.softplus(raw_std) + STD_FLOOR
        return GaussianBelief(mean, std)


class FactorHead(nn.Module):
    """Logistic head for p(e = 1 | d), squeezed into (PROB_EPS, 1 - PROB_EPS).

    The affine squeeze keeps gradients alive where a hard clamp would cut
    them once the sigmoid saturates in float32.
    """

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.net = _mlp(in_dim, (hidden,), 1)

    def forward(self, d: torch.Tensor) -> BernoulliBelief:
        p = torch.sigmoid(self.net(d)).squeeze(-1)
        p = p * (1.0 - 2.0 * PROB_EPS) + PROB_EPS
        return BernoulliBelief(p)


class FrameEncoder(nn.Module):
    """Stride-2 conv stack from (C, H, W) frames to a flat feature vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, w, c = cfg.frame_shape
        layers: list[nn.Module] = []
        last = c
        for ch in cfg.conv_channels:
            layers += [nn.Conv2d(last, ch, kernel_size=4, stride=2, padding=1), nn.ELU()]
            last = ch
        self.convs = nn.Sequential(*layers)
        scale = 2 ** len(cfg.conv_channels)
        self.flat = last * (h // scale) * (w // scale)
        self.out = nn.Linear(self.flat, cfg.det_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        h = self.convs(frames)
        return self.out(h.reshape(h.shape[0], -1))


class FrameDecoder(nn.Module):
    """Mirror of the encoder: (state, context) to raw image means.

    The output is unsquashed; the observation model is a fixed-scale
    Gaussian on pixel intensities, so means may leave [0, 1] and callers
    clip only for display.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, w, c = cfg.frame_shape
        chans = cfg.conv_channels
        scale = 2 ** len(chans)
        self.base_hw = (h // scale, w // scale)
        self.base_ch = chans[-1]
        self.inp = nn.Linear(cfg.latent_dim + cfg.det_dim, self.base_ch * self.base_hw[0] * self.base_hw[1])
        layers: list[nn.Module] = []
        rev = list(chans[::-1])
        for i, ch in enumerate(rev):
            out_ch = rev[i + 1] if i + 1 < len(rev) else c
            layers.append(nn.ConvTranspose2d(ch, out_ch, kernel_size=4, stride=2, padding=1))
            if i + 1 < len(rev):
                layers.append(nn.ELU())
        self.deconvs = nn.Sequential(*layers)

    def forward(self, s: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        h = self.inp(torch.cat([s, c], dim=-1))
        h = nn.functional.elu(h)
        h = h.reshape(-1, self.base_ch, *self.base_hw)
        return self.deconvs(h)


class HierarchyModel(nn.Module):
    """The full stack of per-level networks plus the learned top context."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n, z, d = config.num_levels, config.latent_dim, config.det_dim

        self.frame_encoder = FrameEncoder(config)
        # x^n = f(x^{n-1}) for n >= 2
        self.feature_mlps = nn.ModuleList(
            [_mlp(d, (config.enc_hidden,), d) for _ in range(n - 1)]
        )
        self.frame_decoder = FrameDecoder(config)
        # context below level n for n >= 2: c^{n-1} = f(s^n, c^n)
        self.context_mlps = nn.ModuleList(
            [_mlp(z + d, (config.dec_hidden,), d) for _ in range(n - 1)]
        )
        self.temporal_cells = nn.ModuleList([nn.GRUCell(z, d) for _ in range(n)])
        self.posterior_heads = nn.ModuleList(
            [GaussianHead(2 * d, config.head_hidden, z) for _ in range(n)]
        )
        self.prior_state_heads = nn.ModuleList(
            [GaussianHead(2 * d, config.head_hidden, z) for _ in range(n)]
        )
        self.prior_factor_heads = nn.ModuleList(
            [FactorHead(d, config.factor_hidden) for _ in range(n)]
        )
        self.top_context = nn.Parameter(torch.zeros(d))

    # ---- shape helpers -------------------------------------------------

    def _check_level(self, level: int) -> int:
        if not 1 <= level <= self.config.num_levels:
            raise ContractViolation(
                f"level {level} outside 1..{self.config.num_levels}"
            )
        return level - 1

    def _guard(self, t: torch.Tensor, what: str) -> torch.Tensor:
        if not bool(torch.isfinite(t.detach()).all()):
            raise NonFiniteActivation(f"{what} produced non-finite values")
        return t

    @property
    def device(self) -> torch.device:
        return self.top_context.device

    @property
    def dtype(self) -> torch.dtype:
        return self.top_context.dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # ---- per-level computations ----------------------------------------

    def encode(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """Frames [B, C, H, W] to deterministic features [x^1 .. x^N]."""
        h, w, c = self.config.frame_shape
        if frames.dim() != 4 or frames.shape[1:] != (c, h, w):
            raise ContractViolation(
                f"expected frames [B, {c}, {h}, {w}], got {tuple(frames.shape)}"
            )
        xs = [self._guard(self.frame_encoder(frames), "frame encoder")]
        for i, mlp in enumerate(self.feature_mlps):
            xs.append(self._guard(mlp(xs[-1]), f"feature mlp level {i + 2}"))
        return xs

    def decode(self, level: int, s: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Level 1 returns the image mean [B, C, H, W]; higher levels return
        the deterministic context handed to the level below."""
        i = self._check_level(level)
        if i == 0:
            return self._guard(self.frame_decoder(s, c), "frame decoder")
        return self._guard(
            self.context_mlps[i - 1](torch.cat([s, c], dim=-1)),
            f"context mlp level {level}",
        )

    def temporal_step(self, level: int, s: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        i = self._check_level(level)
        return self._guard(self.temporal_cells[i](s, d), f"temporal cell level {level}")

    def posterior_head(self, level: int, x: torch.Tensor, c: torch.Tensor) -> GaussianBelief:
        i = self._check_level(level)
        out = self.posterior_heads[i](x, c)
        self._guard(out.mean, f"posterior head level {level}")
        return out

    def prior_state_head(self, level: int, d: torch.Tensor, c: torch.Tensor) -> GaussianBelief:
        i = self._check_level(level)
        out = self.prior_state_heads[i](d, c)
        self._guard(out.mean, f"prior state head level {level}")
        return out

    def prior_factor_head(self, level: int, d: torch.Tensor) -> BernoulliBelief:
        i = self._check_level(level)
        out = self.prior_factor_heads[i](d)
        self._guard(out.p_one, f"prior factor head level {level}")
        return out

    def top_context_for(self, batch: int) -> torch.Tensor:
        return self.top_context.unsqueeze(0).expand(batch, -1)

    def initial_d(self, batch: int) -> torch.Tensor:
        return torch.zeros(
            batch, self.config.det_dim, device=self.device, dtype=self.dtype
        )
