"""Final representations, matching score and the training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .encoders import ModelParameters

PROB_CLAMP = 1e-12


@dataclass
class PairScore:
    h_u: torch.Tensor
    h_i: torch.Tensor
    y_hat_raw: torch.Tensor
    y_hat_prob: torch.Tensor


def assemble(v_o: torch.Tensor, v_hops: torch.Tensor, v_plus: torch.Tensor | None) -> torch.Tensor:
    """``v_o || v^1 || ... || v^K || v+`` (the last part omitted when referencing is off)."""
    parts = [v_o, v_hops.flatten(start_dim=-2)]
    if v_plus is not None:
        parts.append(v_plus)
    return torch.cat(parts, dim=-1)


def assemble_and_score(h_u: torch.Tensor, h_i: torch.Tensor) -> PairScore:
    if h_u.shape != h_i.shape:
        raise ValueError(f"representation shapes differ: {tuple(h_u.shape)} vs {tuple(h_i.shape)}")
    raw = (h_u * h_i).sum(dim=-1)
    return PairScore(h_u, h_i, raw, torch.sigmoid(raw))


def cross_entropy_loss(labels: torch.Tensor, probs: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = labels.to(p.dtype)
    per = -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    return per.mean() if reduction == "mean" else per.sum()


_LOGIT_CLAMP = math.log((1.0 - PROB_CLAMP) / PROB_CLAMP)


def cross_entropy_from_logits(labels: torch.Tensor, logits: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Same loss as :func:`cross_entropy_loss` evaluated on raw scores.

    Stable in float32, where sigmoid saturates long before the probability
    clamp would apply.
    """
    x = logits.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
    return F.binary_cross_entropy_with_logits(x, labels.to(x.dtype), reduction=reduction)


def sparsity_penalty(beta: torch.Tensor, tau: float, eta: float) -> torch.Tensor:
    """Expected number of open seed gates, summed over rows and seeds."""
    if not (tau > 0 and eta < 0):
        raise ValueError("need tau > 0 and eta < 0")
    return torch.sigmoid(torch.log(beta) - tau * math.log(-eta)).sum()


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    sp: torch.Tensor
    l2: torch.Tensor
    total: torch.Tensor
    lambda1: float
    lambda2: float

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("ce", "sp", "l2", "total")}


def total_loss(ce: torch.Tensor, sp: torch.Tensor, params: ModelParameters,
               lambda1: float, lambda2: float) -> LossBreakdown:
    l2 = params.l2()
    return LossBreakdown(ce, sp, l2, ce + lambda1 * sp + lambda2 * l2, lambda1, lambda2)
