"""Numerically safe primitives for diagonal Gaussian and Bernoulli beliefs.

Everything downstream (mixture selection, ELBO terms, rollout surprisal)
funnels through the handful of functions in this module, so the numerical
conventions live here in one place:

- scales are kept strictly positive by construction (``STD_FLOOR``),
- Bernoulli probabilities are clamped away from {0, 1} inside KL terms
  (``PROB_EPS``),
- KL divergences and log densities accumulate in float64 regardless of the
  dtype the model runs in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

# Floor added to softplus outputs so predicted scales cannot underflow.
STD_FLOOR = 1e-4
# Clamp for Bernoulli probabilities inside log terms.
PROB_EPS = 1e-6

_LOG_2PI = math.log(2.0 * math.pi)


class ContractViolation(ValueError):
    """A caller handed over malformed distribution parameters."""


@dataclass(frozen=True)
class GaussianBelief:
    """Diagonal Gaussian with shape ``[..., dim]`` and strictly positive scale."""

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if not isinstance(self.mean, torch.Tensor) or not isinstance(self.std, torch.Tensor):
            raise ContractViolation("mean and std must be torch tensors")
        if self.mean.shape != self.std.shape:
            raise ContractViolation(
                f"mean shape {tuple(self.mean.shape)} != std shape {tuple(self.std.shape)}"
            )
        # Validate against the detached values; the graph is untouched.
        if not bool((self.std.detach() > 0).all()):
            raise ContractViolation("std must be strictly positive everywhere")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, idx) -> "GaussianBelief":
        return GaussianBelief(self.mean[idx], self.std[idx])

    def detach(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.detach(), self.std.detach())

    def clone(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.clone(), self.std.clone())


@dataclass(frozen=True)
class BernoulliBelief:
    """Bernoulli over a binary indicator, parameterised by p(one)."""

    p_one: torch.Tensor

    def __post_init__(self):
        if not isinstance(self.p_one, torch.Tensor):
            raise ContractViolation("p_one must be a torch tensor")
        p = self.p_one.detach()
        if not bool(((p >= 0) & (p <= 1)).all()):
            raise ContractViolation("p_one must lie in [0, 1]")

    def __getitem__(self, idx) -> "BernoulliBelief":
        return BernoulliBelief(self.p_one[idx])


def kl_diag_gaussian(q: GaussianBelief, p: GaussianBelief) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis.

    Accumulates in float64 and returns a float64 tensor shaped like the
    leading (batch) dims of the inputs.
    """
    if q.dim != p.dim:
        raise ContractViolation(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    qm, qs = q.mean.double(), q.std.double()
    pm, ps = p.mean.double(), p.std.double()
    var_ratio = (qs / ps) ** 2
    kl = 0.5 * (var_ratio + ((qm - pm) / ps) ** 2 - 1.0) - torch.log(qs / ps)
    return kl.sum(dim=-1)


def kl_bernoulli(q: BernoulliBelief, p: BernoulliBelief) -> torch.Tensor:
    """KL(q || p) for Bernoulli beliefs, elementwise over the shared shape.

    ``p`` is clamped to [PROB_EPS, 1 - PROB_EPS] so hard one-hot q stays
    finite; xlogy handles q in {0, 1} exactly. Returns float64.
    """
    qp = q.p_one.double()
    pp = p.p_one.double().clamp(PROB_EPS, 1.0 - PROB_EPS)
    one_q = 1.0 - qp
    kl = (
        torch.special.xlogy(qp, qp)
        - torch.special.xlogy(qp, pp)
        + torch.special.xlogy(one_q, one_q)
        - torch.special.xlogy(one_q, 1.0 - pp)
    )
    return kl


def reparam_sample(belief: GaussianBelief, noise: torch.Tensor) -> torch.Tensor:
    """Location-scale draw ``mean + std * noise`` with externally supplied noise.

    Noise is passed in (rather than drawn here) so sampling stays a
    deterministic function of its inputs; callers own the RNG.
    """
    if noise.shape != belief.mean.shape:
        raise ContractViolation(
            f"noise shape {tuple(noise.shape)} != belief shape {tuple(belief.mean.shape)}"
        )
    return belief.mean + belief.std * noise


def belief_log_density(x: torch.Tensor, belief: GaussianBelief) -> torch.Tensor:
    """log N(x; mean, diag std) summed over the last axis, float64."""
    if x.shape != belief.mean.shape:
        raise ContractViolation(
            f"x shape {tuple(x.shape)} != belief shape {tuple(belief.mean.shape)}"
        )
    z = (x.double() - belief.mean.double()) / belief.std.double()
    per_dim = -0.5 * z**2 - torch.log(belief.std.double()) - 0.5 * _LOG_2PI
    return per_dim.sum(dim=-1)


def gaussian_log_density(
    x: torch.Tensor,
    mean: torch.Tensor,
    std: float,
    batch_dims: int = 0,
) -> torch.Tensor:
    """Diagonal Gaussian log density with scalar shared scale.

    Sums over all axes beyond the first ``batch_dims`` axes; with the default
    ``batch_dims=0`` the result is a float64 scalar. ``std`` must be a
    positive Python float (it is the observation scale, not a tensor).
    """
    if not isinstance(std, (int, float)):
        raise ContractViolation("std must be a scalar")
    if std <= 0:
        raise ContractViolation("std must be strictly positive")
    if x.shape != mean.shape:
        raise ContractViolation(
            f"x shape {tuple(x.shape)} != mean shape {tuple(mean.shape)}"
        )
    z = (x.double() - mean.double()) / std
    per_elem = -0.5 * z**2 - math.log(std) - 0.5 * _LOG_2PI
    if batch_dims == 0:
        return per_elem.sum()
    dims = tuple(range(batch_dims, per_elem.dim()))
    return per_elem.sum(dim=dims)
