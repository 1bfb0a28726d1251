"""Seed pool, hard-concrete seed gates and gated information aggregation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .data import CollaborativeKnowledgeGraph

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class SeedPool:
    """High-degree users and items whose rows of the seed table act as references.

    User seeds occupy seed-table rows ``[0, len(user_seeds))``; item seeds
    follow.
    """

    user_seeds: np.ndarray
    item_seeds: np.ndarray
    user_degrees: np.ndarray
    item_degrees: np.ndarray

    @property
    def size(self) -> int:
        return len(self.user_seeds) + len(self.item_seeds)

    def rows(self, kind: int) -> slice:
        nu = len(self.user_seeds)
        return slice(0, nu) if kind == 0 else slice(nu, self.size)

    def slots(self, kind: int, num_nodes: int) -> np.ndarray:
        """Per-node position within its side's seed block, -1 for non-seeds."""
        seeds = self.user_seeds if kind == 0 else self.item_seeds
        out = np.full(num_nodes, -1, dtype=np.int64)
        out[seeds] = np.arange(len(seeds))
        return out

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("# kind\tinternal_id\tdegree\n")
            for kind, ids, deg in (("user", self.user_seeds, self.user_degrees),
                                   ("item", self.item_seeds, self.item_degrees)):
                for n, d in zip(ids.tolist(), deg.tolist()):
                    fh.write(f"{kind}\t{n}\t{d}\n")

    @classmethod
    def read_tsv(cls, path) -> SeedPool:
        cols: dict[str, list[tuple[int, int]]] = {"user": [], "item": []}
        with open(path, encoding="ascii") as fh:
            for line in fh:
                s = line.strip()
                if s and not s.startswith("#"):
                    kind, n, d = s.split("\t")
                    cols[kind].append((int(n), int(d)))
        arr = {k: np.asarray(v, dtype=np.int64).reshape(-1, 2) for k, v in cols.items()}
        return cls(arr["user"][:, 0], arr["item"][:, 0], arr["user"][:, 1], arr["item"][:, 1])


def _top_by_degree(degree: np.ndarray, size: int, exclusion_quantile: float, kind: str):
    ids = np.arange(len(degree))
    if exclusion_quantile > 0 and len(degree):
        cutoff = np.quantile(degree, exclusion_quantile)
        # strictly-below-cutoff nodes are the tail; ties at the cutoff survive
        ids = ids[degree[ids] >= cutoff]
        ids = ids[degree[ids] > 0]
    if len(ids) < size:
        warnings.warn(f"only {len(ids)} eligible {kind}s for a seed block of {size}; shrinking", stacklevel=3)
        size = len(ids)
    order = np.lexsort((ids, -degree[ids]))
    chosen = ids[order[:size]]
    return chosen, degree[chosen]


def build_seed_pool(g: CollaborativeKnowledgeGraph, size_per_side: int = 64,
                    exclusion_quantile: float = 0.1) -> SeedPool:
    """Top-degree users and items after dropping the low-degree tail; ties go to lower ids."""
    us, ud = _top_by_degree(g.user_degrees(), size_per_side, exclusion_quantile, "user")
    its, idg = _top_by_degree(g.item_degrees(), size_per_side, exclusion_quantile, "item")
    return SeedPool(us, its, ud, idg)


def selection_scores(weight: torch.Tensor, bias: torch.Tensor, v_star: torch.Tensor) -> torch.Tensor:
    """beta = exp(W v* + b), with the exponent clamped to +-30."""
    return torch.exp(torch.clamp(v_star @ weight.T + bias, -LOGIT_CLAMP, LOGIT_CLAMP))


@dataclass
class GateState:
    beta: torch.Tensor
    gamma: torch.Tensor
    gamma_rescaled: torch.Tensor
    z_bar: torch.Tensor
    eta: float
    tau: float


def _check_gate_args(tau: float, eta: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not eta < 0:
        raise ValueError(f"stretch bound eta must be negative, got {eta}")


def _stretch(beta, tau, eta, noise_logit):
    gamma = torch.sigmoid((noise_logit + torch.log(beta)) / tau)
    # same as (1 - eta) * gamma + eta, but exact at gamma = 0 and gamma = 1
    gamma_rescaled = gamma + eta * (1.0 - gamma)
    return GateState(beta, gamma, gamma_rescaled, torch.clamp(gamma_rescaled, min=0.0), eta, tau)


def sample_gates(beta: torch.Tensor, tau: float, eta: float, xi: torch.Tensor) -> GateState:
    """Hard-concrete relaxation of the seed indicator for uniform noise ``xi``."""
    _check_gate_args(tau, eta)
    if bool(((xi <= 0) | (xi >= 1)).any()):
        raise ValueError("xi must lie strictly inside (0, 1); resample boundary draws")
    return _stretch(beta, tau, eta, torch.log(xi) - torch.log1p(-xi))


def draw_uniform(shape, generator: torch.Generator | None = None, dtype=torch.float64) -> torch.Tensor:
    """Uniform draws in the open interval (0, 1); exact zeros are redrawn."""
    xi = torch.rand(shape, generator=generator, dtype=dtype)
    while bool((xi <= 0).any()):
        bad = xi <= 0
        xi[bad] = torch.rand(int(bad.sum()), generator=generator, dtype=dtype)
    return xi


def deterministic_gates(beta: torch.Tensor, tau: float, eta: float) -> GateState:
    """Evaluation-time gates: the noise sits at its median, xi = 0.5."""
    _check_gate_args(tau, eta)
    return _stretch(beta, tau, eta, torch.zeros_like(beta))


def gate_open_probability(beta, tau: float, eta: float):
    """P(z_bar > 0) = sigmoid(log beta - tau * log(-eta))."""
    _check_gate_args(tau, eta)
    if isinstance(beta, torch.Tensor):
        return torch.sigmoid(torch.log(beta) - tau * math.log(-eta))
    x = np.log(beta) - tau * math.log(-eta)
    return 1.0 / (1.0 + np.exp(-x))


def referencing_embedding(seed_rows: torch.Tensor, z_bar: torch.Tensor, seed_slot: torch.Tensor | None = None,
                          masked: bool = False) -> torch.Tensor:
    """Softmax-over-gates mixture of seed embeddings.

    ``seed_rows`` is this side's ``(|S_side|, 2d)`` block and ``z_bar`` is
    ``(..., |S_side|)``. Nodes that are seeds themselves (``seed_slot >= 0``)
    take their own row verbatim. With ``masked`` the softmax only runs over
    open gates; a node with every gate closed then gets a zero vector.
    """
    if masked:
        weights = _masked_gate_softmax(z_bar)
    else:
        weights = torch.softmax(z_bar, dim=-1)
    t_star = weights @ seed_rows
    if seed_slot is not None:
        is_seed = seed_slot >= 0
        if bool(is_seed.any()):
            own = seed_rows[seed_slot.clamp(min=0)]
            t_star = torch.where(is_seed.unsqueeze(-1), own, t_star)
    return t_star


def _masked_gate_softmax(z_bar: torch.Tensor) -> torch.Tensor:
    open_ = z_bar > 0
    e = torch.exp(z_bar) * open_
    z = e.sum(dim=-1, keepdim=True)
    return e / torch.where(z > 0, z, torch.ones_like(z))


def gated_aggregate(gate_weight: torch.Tensor, gate_bias: torch.Tensor, gate_query: torch.Tensor,
                    v_star: torch.Tensor, t_star: torch.Tensor) -> torch.Tensor:
    """Two-way softmax blend of ``v_star`` and ``t_star`` driven by a shared gate MLP."""
    c1 = torch.sigmoid(v_star @ gate_weight.T + gate_bias) @ gate_query
    c2 = torch.sigmoid(t_star @ gate_weight.T + gate_bias) @ gate_query
    w = torch.softmax(torch.stack([c1, c2], dim=-1), dim=-1)
    return w[..., :1] * v_star + w[..., 1:] * t_star
