"""Two-component temporal prior and the hard selection rule over it.

At every level the prior over the next state is a mixture of two diagonal
Gaussians: a *static* component (the belief carried over from the previous
step, frozen as parameters) and a *change* component (the network's
prediction). A binary indicator picks the component; inference over the
indicator is non-parametric: compare the KL from the new posterior to each
component and keep the closer one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .distributions import (
    BernoulliBelief,
    ContractViolation,
    GaussianBelief,
    kl_diag_gaussian,
)

# Ties in the KL comparison resolve to the static component. The margin is
# in nats and only exists to make exact ties deterministic.
TIE_EPS = 1e-9


@dataclass(frozen=True)
class TemporalMixturePrior:
    """Static/change mixture for one level, plus the prior over the indicator."""

    static: GaussianBelief
    change: GaussianBelief
    indicator: BernoulliBelief

    def __post_init__(self):
        if self.static.dim != self.change.dim:
            raise ContractViolation(
                f"static dim {self.static.dim} != change dim {self.change.dim}"
            )
        if self.static.mean.shape != self.change.mean.shape:
            raise ContractViolation("static and change must share batch shape")


def component_kls(
    q: GaussianBelief, prior: TemporalMixturePrior
) -> tuple[torch.Tensor, torch.Tensor]:
    """(KL(q || change), KL(q || static)), both float64 over batch dims."""
    return kl_diag_gaussian(q, prior.change), kl_diag_gaussian(q, prior.static)


def select_component(q: GaussianBelief, prior: TemporalMixturePrior) -> torch.Tensor:
    """Hard indicator choice: 1 (change) iff q is strictly closer to change.

    Closer is measured by KL(q || component). Ties within TIE_EPS nats go to
    the static component, so a level only pays for a change when the new
    posterior genuinely moved.
    """
    kl_change, kl_static = component_kls(q, prior)
    return ((kl_static - kl_change) > TIE_EPS).long()


def indicator_posterior(
    q: GaussianBelief, prior: TemporalMixturePrior
) -> BernoulliBelief:
    """Closed-form variational posterior over the indicator.

    Treating the two mixture components as clusters, the optimal q(e) is a
    logistic in the KL difference plus the prior log odds:

        q(e=0) = sigmoid(KL(q||change) - KL(q||static) + log p(e=0)/p(e=1))

    The hard rule in :func:`select_component` is the zero-temperature,
    flat-prior limit of this expression. Used as an oracle and diagnostic;
    training uses the hard rule.
    """
    kl_change, kl_static = component_kls(q, prior)
    p1 = prior.indicator.p_one.double().clamp(1e-12, 1.0 - 1e-12)
    log_odds_zero = torch.log((1.0 - p1) / p1)
    q_zero = torch.sigmoid(kl_change - kl_static + log_odds_zero)
    return BernoulliBelief(1.0 - q_zero)


def selected_component(e: int, prior: TemporalMixturePrior) -> GaussianBelief:
    """Return the component picked by the indicator, as the same object."""
    if e not in (0, 1):
        raise ContractViolation(f"indicator must be 0 or 1, got {e!r}")
    return prior.change if e == 1 else prior.static


def apply_nested_constraint(raw: Sequence[int] | np.ndarray) -> np.ndarray:
    """Force indicators to respect the nested-timescale ordering.

    Level 1 always changes; any level above a static level is static too:
    out[0] = 1 and out[n] = raw[n] AND out[n-1]. Returns int8, ordered from
    the bottom level up.
    """
    raw = np.asarray(raw)
    if raw.ndim != 1 or raw.size < 1:
        raise ContractViolation("raw indicators must be a non-empty 1-d sequence")
    if not np.isin(raw, (0, 1)).all():
        raise ContractViolation("raw indicators must be binary")
    out = np.zeros(raw.size, dtype=np.int8)
    out[0] = 1
    for n in range(1, raw.size):
        out[n] = raw[n] & out[n - 1]
    return out


def blocking_level(indicators: Sequence[int] | np.ndarray) -> int:
    """First static level in a nested indicator vector (1-based).

    Returns N + 1 when every level changes. Input must already satisfy the
    nested constraint.
    """
    ind = np.asarray(indicators)
    validate_nested(ind)
    zeros = np.flatnonzero(ind == 0)
    return int(zeros[0]) + 1 if zeros.size else ind.size + 1


def validate_nested(indicators: np.ndarray) -> None:
    """Raise unless the vector is binary, starts at 1 and is non-increasing."""
    ind = np.asarray(indicators)
    if ind.ndim != 1 or ind.size < 1:
        raise ContractViolation("indicator vector must be non-empty 1-d")
    if not np.isin(ind, (0, 1)).all():
        raise ContractViolation("indicators must be binary")
    if ind[0] != 1:
        raise ContractViolation("the bottom level must always change")
    if np.any(np.diff(ind.astype(np.int8)) > 0):
        raise ContractViolation("a level above a static level cannot change")
