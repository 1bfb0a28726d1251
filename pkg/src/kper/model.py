"""Pairwise forward pass: encoders, seed referencing and scoring over batches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .encoders import ModelParameters, encode_hop, encode_interactive, fuse, masked_softmax
from .referencing import (
    LOGIT_CLAMP, SeedPool, deterministic_gates, draw_uniform, gated_aggregate, referencing_embedding,
    sample_gates, selection_scores,
)
from .sampling import ITEM, USER, TripleNeighborhoods
from .scoring import assemble


@dataclass
class SideOutput:
    v_o: torch.Tensor
    v_hops: torch.Tensor
    v_star: torch.Tensor
    v_plus: torch.Tensor | None
    beta: torch.Tensor | None
    z_bar: torch.Tensor | None

    @property
    def h(self) -> torch.Tensor:
        return assemble(self.v_o, self.v_hops, self.v_plus)


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    user: SideOutput
    item: SideOutput


class _TorchNeighborhoods:
    def __init__(self, nb: TripleNeighborhoods):
        self.source = nb
        self.neighbors = {k: tuple(torch.from_numpy(np.ascontiguousarray(a)) for a in nb.neighbors(k))
                          for k in (USER, ITEM)}
        self.hops = {k: tuple(torch.from_numpy(np.ascontiguousarray(a)) for a in nb.hops(k))
                     for k in (USER, ITEM)}


def _as_index(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.long)
    return torch.as_tensor(np.array(x), dtype=torch.long)


class KPER:
    """Scores (user, item) pairs from parameters, a seed pool and sampled neighborhoods.

    ``mask_target`` hides the scored counterpart from a node's own
    interaction neighbors so a training positive cannot be recognised by
    self-matching. ``use_referencing=False`` drops the seed referencing branch
    (and its sparsity term); ``attentive_kg=False`` weights triples equally.
    """

    def __init__(self, params: ModelParameters, pool: SeedPool, num_users: int, num_items: int,
                 K: int, tau: float, eta: float, *, use_referencing: bool = True,
                 masked_referencing: bool = False, mask_target: bool = True, attentive_kg: bool = True):
        self.params = params
        self.pool = pool
        self.num_users, self.num_items = num_users, num_items
        self.K, self.tau, self.eta = K, tau, eta
        self.use_referencing = use_referencing
        self.masked_referencing = masked_referencing
        self.mask_target = mask_target
        self.attentive_kg = attentive_kg
        self._slots = {USER: torch.from_numpy(pool.slots(USER, num_users)),
                       ITEM: torch.from_numpy(pool.slots(ITEM, num_items))}
        self._nb_cache: _TorchNeighborhoods | None = None

    @property
    def dtype(self):
        return self.params.entity_table.dtype

    def _torch_nb(self, nb: TripleNeighborhoods) -> _TorchNeighborhoods:
        if self._nb_cache is None or self._nb_cache.source is not nb:
            self._nb_cache = _TorchNeighborhoods(nb)
        return self._nb_cache

    def encode_hops(self, kind: int, nodes: torch.Tensor, nb: TripleNeighborhoods) -> torch.Tensor:
        """Per-hop knowledge embeddings ``(len(nodes), K, d)``."""
        p = self.params
        hops, valid = self._torch_nb(nb).hops[kind]
        trip, ok = hops[nodes], valid[nodes]
        return encode_hop(p, p.entity_table[trip[..., 0]], p.relation_table[trip[..., 1]],
                          p.entity_table[trip[..., 2]], ok, attentive=self.attentive_kg)

    def side(self, kind: int, nodes: torch.Tensor, targets: torch.Tensor, nb: TripleNeighborhoods,
             v_hops: torch.Tensor, gates: str = "deterministic",
             generator: torch.Generator | None = None) -> SideOutput:
        p = self.params
        table = p.entity_table if kind == USER else p.user_table
        nbrs, valid = self._torch_nb(nb).neighbors[kind]
        ids = nbrs[nodes]
        mask = valid[nodes].unsqueeze(-1).expand(ids.shape)
        if self.mask_target:
            mask = mask & (ids != targets.unsqueeze(-1))
        v_o = encode_interactive(table[targets], table[ids], mask)
        v_star = fuse(v_o, v_hops)
        if not self.use_referencing:
            return SideOutput(v_o, v_hops, v_star, None, None, None)
        rows = self.pool.rows(kind)
        beta = selection_scores(p.probe_weight[rows], p.probe_bias[rows], v_star)
        if gates == "sample":
            state = sample_gates(beta, self.tau, self.eta, draw_uniform(beta.shape, generator, beta.dtype))
        else:
            state = deterministic_gates(beta, self.tau, self.eta)
        t_star = referencing_embedding(p.seed_table[rows], state.z_bar, self._slots[kind][nodes],
                                       masked=self.masked_referencing)
        v_plus = gated_aggregate(p.gate_weight, p.gate_bias, p.gate_query, v_star, t_star)
        return SideOutput(v_o, v_hops, v_star, v_plus, beta, state.z_bar)

    def forward(self, users, items, nb: TripleNeighborhoods, gates: str = "deterministic",
                generator: torch.Generator | None = None, hop_cache: dict | None = None) -> ForwardOutput:
        users, items = _as_index(users), _as_index(items)
        hop = {}
        for kind, nodes in ((USER, users), (ITEM, items)):
            if hop_cache is not None:
                hop[kind] = hop_cache[kind][nodes]
            else:
                uniq, inv = torch.unique(nodes, return_inverse=True)
                hop[kind] = self.encode_hops(kind, uniq, nb)[inv]
        u = self.side(USER, users, items, nb, hop[USER], gates, generator)
        i = self.side(ITEM, items, users, nb, hop[ITEM], gates, generator)
        return ForwardOutput((u.h * i.h).sum(-1), u, i)

    @torch.no_grad()
    def hop_cache(self, nb: TripleNeighborhoods, chunk: int = 4096) -> dict:
        out = {}
        for kind, n in ((USER, self.num_users), (ITEM, self.num_items)):
            parts = [self.encode_hops(kind, torch.arange(s, min(s + chunk, n)), nb) for s in range(0, n, chunk)]
            out[kind] = torch.cat(parts) if parts else torch.zeros(0, self.K, self.params.d, dtype=self.dtype)
        return out

    @torch.no_grad()
    def score_pairs(self, users, items, nb: TripleNeighborhoods, chunk: int = 16384,
                    hop_cache: dict | None = None) -> np.ndarray:
        """Deterministic-gate raw scores for explicit pairs."""
        users = torch.as_tensor(np.asarray(users), dtype=torch.long)
        items = torch.as_tensor(np.asarray(items), dtype=torch.long)
        cache = hop_cache or self.hop_cache(nb)
        out = [self.forward(users[s:s + chunk], items[s:s + chunk], nb, hop_cache=cache).logits
               for s in range(0, len(users), chunk)]
        return torch.cat(out).numpy() if out else np.zeros(0)

    def _grid_side(self, kind: int, nodes: torch.Tensor, targets: torch.Tensor, nb: TripleNeighborhoods,
                   v_hops: torch.Tensor):
        """Deterministic-gate ``(v_o, v_plus)`` for every (node, target) combination.

        Same computation as :meth:`side`, restructured for full-catalog
        scoring: each node's neighbors are gathered once, and linear maps of
        ``v* = v_o || mean(v_hops)`` are split so the per-node half is computed
        once instead of per target. Outputs have shape ``(len(nodes), len(targets), .)``.
        """
        p = self.params
        d = p.d
        table = p.entity_table if kind == USER else p.user_table
        nbrs, valid = self._torch_nb(nb).neighbors[kind]
        ids = nbrs[nodes]
        n, m = len(nodes), len(targets)
        neigh = table[ids]
        logits = torch.bmm(neigh, table[targets].T.expand(n, -1, -1)).transpose(1, 2)
        mask = valid[nodes].view(n, 1, 1).expand(n, m, ids.shape[1])
        if self.mask_target:
            mask = mask & (ids.unsqueeze(1) != targets.view(1, m, 1))
        v_o = torch.bmm(masked_softmax(logits, mask), neigh)
        if not self.use_referencing:
            return v_o, None
        hm = v_hops.mean(dim=1) if v_hops.shape[1] else torch.zeros(n, d, dtype=v_o.dtype)
        rows = self.pool.rows(kind)
        wp, bp = p.probe_weight[rows], p.probe_bias[rows]
        x = v_o @ wp[:, :d].T + (hm @ wp[:, d:].T + bp).unsqueeze(1)
        beta = torch.exp(torch.clamp(x, -LOGIT_CLAMP, LOGIT_CLAMP))
        state = deterministic_gates(beta, self.tau, self.eta)
        slot = self._slots[kind][nodes].view(n, 1)
        t_star = referencing_embedding(p.seed_table[rows], state.z_bar, slot, masked=self.masked_referencing)
        wc, bc, q = p.gate_weight, p.gate_bias, p.gate_query
        c1 = torch.sigmoid(v_o @ wc[:, :d].T + (hm @ wc[:, d:].T + bc).unsqueeze(1)) @ q
        c2 = torch.sigmoid(t_star @ wc.T + bc) @ q
        w = torch.softmax(torch.stack([c1, c2], dim=-1), dim=-1)
        w1, w2 = w[..., :1], w[..., 1:]
        v_plus = torch.cat([w1 * v_o + w2 * t_star[..., :d], w1 * hm.unsqueeze(1) + w2 * t_star[..., d:]], dim=-1)
        return v_o, v_plus

    @torch.no_grad()
    def score_matrix(self, users, nb: TripleNeighborhoods, hop_cache: dict | None = None) -> torch.Tensor:
        """Deterministic-gate scores of ``users`` against the whole catalog, ``(len(users), num_items)``."""
        users = torch.as_tensor(np.asarray(users), dtype=torch.long)
        cache = hop_cache or self.hop_cache(nb)
        items = torch.arange(self.num_items)
        hu, hi = cache[USER][users], cache[ITEM]
        o_u, p_u = self._grid_side(USER, users, items, nb, hu)
        o_i, p_i = self._grid_side(ITEM, items, users, nb, hi)
        s = torch.einsum("uid,iud->ui", o_u, o_i) + hu.flatten(1) @ hi.flatten(1).T
        if p_u is not None:
            s = s + torch.einsum("uid,iud->ui", p_u, p_i)
        return s

    def scorer(self, nb: TripleNeighborhoods, block: int = 16):
        """Return ``f(user_ids) -> (len(user_ids), num_items)`` score matrix."""
        cache = self.hop_cache(nb)

        def score(user_ids):
            user_ids = np.asarray(user_ids)
            out = [self.score_matrix(user_ids[s:s + block], nb, cache) for s in range(0, len(user_ids), block)]
            if not out:
                return np.zeros((0, self.num_items))
            return torch.cat(out).numpy()

        return score


def batch_sparsity_terms(beta: torch.Tensor, nodes: torch.Tensor, tau: float, eta: float) -> torch.Tensor:
    """Sparsity penalty with every distinct node in the batch counted once.

    Rows are per pair; a node that occurs in several pairs contributes the
    mean of its rows, so the result equals the plain per-node sum when nodes
    are unique.
    """
    terms = torch.sigmoid(torch.log(beta) - tau * math.log(-eta)).sum(-1)
    _, inv, counts = torch.unique(nodes, return_inverse=True, return_counts=True)
    return (terms / counts[inv].to(terms.dtype)).sum()
