"""Motion-compensation loss and the weighted total training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

__all__ = ["LossWeights", "NonFiniteLossError", "motion_compensation_loss", "total_loss"]


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights for the total loss terms."""

    lambda_reg: float = 5.0
    eta_mc: float = 1.0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.eta_mc < 0:
            raise ValueError(
                f"loss weights must be non-negative, got lambda_reg={self.lambda_reg}, "
                f"eta_mc={self.eta_mc}"
            )


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term turns NaN or infinite."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term '{term}' is non-finite ({value})")
        self.term = term
        self.value = value


def motion_compensation_loss(aligned: Sequence[Tensor], reference: Tensor) -> Tensor:
    """Mean absolute difference between each aligned frame and the reference.

    Per aligned frame the L1 distance is averaged over all elements, and the
    per-frame means are summed.  Pulls every warped adjacent frame towards
    the reference features, which supervises the offset prediction without
    any extra labels.
    """
    if len(aligned) == 0:
        raise ValueError("motion_compensation_loss needs at least one aligned frame")
    total = None
    for i, f in enumerate(aligned):
        if f.shape != reference.shape:
            raise ValueError(
                f"aligned frame {i} shape {tuple(f.shape)} does not match "
                f"reference shape {tuple(reference.shape)}"
            )
        term = (f - reference).abs().mean()
        total = term if total is None else total + term
    return total


def _check_finite(name: str, value) -> None:
    if isinstance(value, Tensor):
        finite = bool(torch.isfinite(value.detach()).all())
        scalar = float(value.detach().sum())
    else:
        scalar = float(value)
        finite = math.isfinite(scalar)
    if not finite:
        raise NonFiniteLossError(name, scalar)


def total_loss(l_reg, l_cls, l_obj, l_mc, weights: LossWeights = LossWeights()):
    """Weighted sum of the four training loss terms.

    Raises :class:`NonFiniteLossError` naming the first non-finite term, so a
    diverged run aborts with a pointer to the culprit instead of silently
    training on NaNs.
    """
    for name, value in (("reg", l_reg), ("cls", l_cls), ("obj", l_obj), ("mc", l_mc)):
        _check_finite(name, value)
    return weights.lambda_reg * l_reg + l_cls + l_obj + weights.eta_mc * l_mc
