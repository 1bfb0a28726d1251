"""Entity-neighbor sets and fixed-size per-hop triple samples for users and items."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import CollaborativeKnowledgeGraph

USER, ITEM = 0, 1


def node_rng(run_seed: int, epoch: int, kind: int, node: int) -> np.random.Generator:
    """Independent stream per (run, epoch, node); reproducible in any visiting order."""
    return np.random.default_rng([int(run_seed), int(epoch), int(kind), int(node)])


def _interaction_matrix(g: CollaborativeKnowledgeGraph) -> sp.csr_matrix:
    pos = g.positives()
    data = np.ones(len(pos), dtype=np.int64)
    return sp.csr_matrix((data, (pos[:, 0], pos[:, 1])), shape=(g.num_users, g.num_items))


def _kg_matrix(g: CollaborativeKnowledgeGraph) -> sp.csr_matrix:
    t = g.triples
    data = np.ones(len(t), dtype=np.int64)
    a = sp.csr_matrix((data, (t[:, 0], t[:, 2])), shape=(g.num_entities, g.num_entities))
    a.data[:] = 1
    return a


def _binarize(m) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.data = np.ones_like(m.data)
    m.sort_indices()
    return m


def initial_entity_sets(g: CollaborativeKnowledgeGraph) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Hop-0 entity sets as boolean-pattern CSR matrices over the entity space.

    A user's set is the items it interacted with. An item's set is the item
    itself plus every item interacted with by a user of that item.
    """
    r = _interaction_matrix(g)
    pad = sp.csr_matrix((g.num_items, g.num_entities - g.num_items), dtype=np.int64)
    to_entities = sp.hstack([sp.identity(g.num_items, dtype=np.int64, format="csr"), pad], format="csr")
    users = _binarize(r @ to_entities)
    co = r.T @ r + sp.identity(g.num_items, dtype=np.int64)
    items = _binarize(co @ to_entities)
    return users, items


def expand_hop(g: CollaborativeKnowledgeGraph, prev_entities) -> set[int]:
    """Tails of every triple whose head lies in ``prev_entities``."""
    out: set[int] = set()
    for h in prev_entities:
        lo, hi = g.kg_indptr[h], g.kg_indptr[h + 1]
        out.update(g.triples[lo:hi, 2].tolist())
    return out


def expand_hop_matrix(prev: sp.csr_matrix, kg: sp.csr_matrix) -> sp.csr_matrix:
    return _binarize(prev @ kg)


def sample_triples(g: CollaborativeKnowledgeGraph, prev_entities, size: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Uniform fixed-size sample of triples with head in ``prev_entities``.

    Every pool triple appears once before any repeat when the pool is smaller
    than ``size``. An empty pool yields a ``(0, 3)`` array.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    heads = np.asarray(sorted(prev_entities) if isinstance(prev_entities, (set, frozenset))
                       else prev_entities, dtype=np.int64)
    deg = g.kg_indptr[heads + 1] - g.kg_indptr[heads]
    heads, deg = heads[deg > 0], deg[deg > 0]
    total = int(deg.sum())
    if total == 0:
        return np.empty((0, 3), dtype=np.int64)
    if total >= size:
        draws = rng.choice(total, size, replace=False)
    else:
        draws = np.concatenate([np.arange(total), rng.integers(0, total, size - total)])
        rng.shuffle(draws)
    ends = np.cumsum(deg)
    slot = np.searchsorted(ends, draws, side="right")
    offset = draws - (ends[slot] - deg[slot])
    return g.triples[g.kg_indptr[heads[slot]] + offset]


def sample_interactive_neighbors(g: CollaborativeKnowledgeGraph, kind: int, node: int, l: int,
                                 rng: np.random.Generator) -> np.ndarray:
    """``l`` interaction counterparts of a user (items) or item (users)."""
    adj = g.user_adjacency if kind == USER else g.item_adjacency
    pool = np.fromiter(sorted(adj[node]), dtype=np.int64)
    if len(pool) == 0:
        return np.empty(0, dtype=np.int64)
    if len(pool) >= l:
        return rng.choice(pool, l, replace=False)
    out = np.concatenate([pool, rng.choice(pool, l - len(pool), replace=True)])
    rng.shuffle(out)
    return out


@dataclass
class EntitySets:
    """Hop-0 .. hop-(K-1) entity sets per node kind; fixed for a given graph."""

    users: list[sp.csr_matrix]
    items: list[sp.csr_matrix]

    @classmethod
    def build(cls, g: CollaborativeKnowledgeGraph, K: int) -> EntitySets:
        u0, i0 = initial_entity_sets(g)
        users, items = [u0], [i0]
        kg = _kg_matrix(g)
        for _ in range(1, K):
            users.append(expand_hop_matrix(users[-1], kg))
            items.append(expand_hop_matrix(items[-1], kg))
        return cls(users, items)

    def row(self, kind: int, hop_prev: int, node: int) -> np.ndarray:
        m = (self.users if kind == USER else self.items)[hop_prev]
        return m.indices[m.indptr[node]:m.indptr[node + 1]]


@dataclass
class TripleNeighborhoods:
    """Per-node sampled interaction neighbors and per-hop triples.

    ``*_neighbors`` has shape ``(n, l)``; rows with ``*_neighbor_valid`` False
    belong to isolated nodes. ``*_hops`` has shape ``(n, K, l, 3)`` with
    ``*_hop_valid`` marking hops whose candidate pool was non-empty.
    """

    l: int
    K: int
    user_neighbors: np.ndarray
    user_neighbor_valid: np.ndarray
    item_neighbors: np.ndarray
    item_neighbor_valid: np.ndarray
    user_hops: np.ndarray
    user_hop_valid: np.ndarray
    item_hops: np.ndarray
    item_hop_valid: np.ndarray
    sampling_seed: int
    epoch: int

    def neighbors(self, kind: int):
        if kind == USER:
            return self.user_neighbors, self.user_neighbor_valid
        return self.item_neighbors, self.item_neighbor_valid

    def hops(self, kind: int):
        if kind == USER:
            return self.user_hops, self.user_hop_valid
        return self.item_hops, self.item_hop_valid

    def dump_tsv(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("# node\thop\th,r,t\n")
            for kind, name in ((USER, "u"), (ITEM, "i")):
                hops, valid = self.hops(kind)
                for n in range(hops.shape[0]):
                    for k in range(self.K):
                        if valid[n, k]:
                            for h, r, t in hops[n, k].tolist():
                                fh.write(f"{name}{n}\t{k + 1}\t{h},{r},{t}\n")


def build_neighborhoods(g: CollaborativeKnowledgeGraph, sets: EntitySets, l: int, K: int,
                        run_seed: int, epoch: int) -> TripleNeighborhoods:
    """Sample every node's neighborhood for one epoch from the (train-view) graph."""
    out = {}
    for kind, n in ((USER, g.num_users), (ITEM, g.num_items)):
        nbrs = np.zeros((n, l), dtype=np.int64)
        nvalid = np.zeros(n, dtype=bool)
        hops = np.zeros((n, K, l, 3), dtype=np.int64)
        hvalid = np.zeros((n, K), dtype=bool)
        for node in range(n):
            rng = node_rng(run_seed, epoch, kind, node)
            s = sample_interactive_neighbors(g, kind, node, l, rng)
            if len(s):
                nbrs[node], nvalid[node] = s, True
            for k in range(K):
                t = sample_triples(g, sets.row(kind, k, node), l, rng)
                if len(t):
                    hops[node, k], hvalid[node, k] = t, True
        out[kind] = (nbrs, nvalid, hops, hvalid)
    return TripleNeighborhoods(l, K, *out[USER][:2], *out[ITEM][:2], *out[USER][2:], *out[ITEM][2:],
                               sampling_seed=run_seed, epoch=epoch)
