"""Collaborative knowledge graph ingestion, splitting and negative sampling."""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

ID_KINDS = ("user", "item", "entity", "relation")


class ParseError(ValueError):
    """Malformed line in a ratings or KG file."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class ValidationError(ValueError):
    pass


class NegativeSamplingWarning(UserWarning):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CollaborativeKnowledgeGraph:
    """User-item interactions and KG triples over contiguous id spaces.

    Items occupy entity ids ``0 .. num_items - 1``. ``interactions`` rows are
    ``(user, item, label)``; ``triples`` rows are ``(head, relation, tail)``
    sorted by head so that ``kg_indptr`` indexes them CSR-style.
    """

    num_users: int
    num_items: int
    num_entities: int
    num_relations: int
    interactions: np.ndarray
    triples: np.ndarray
    idmap: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        inter = np.asarray(self.interactions, dtype=np.int64).reshape(-1, 3)
        trip = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((trip[:, 2], trip[:, 1], trip[:, 0]))
        trip = trip[order]
        object.__setattr__(self, "interactions", _frozen(inter))
        object.__setattr__(self, "triples", _frozen(trip))
        self._validate()
        indptr = np.zeros(self.num_entities + 1, dtype=np.int64)
        np.add.at(indptr, trip[:, 0] + 1, 1)
        object.__setattr__(self, "kg_indptr", _frozen(np.cumsum(indptr)))

        pos = inter[inter[:, 2] == 1]
        user_adj: dict[int, set[int]] = {u: set() for u in range(self.num_users)}
        item_adj: dict[int, set[int]] = {i: set() for i in range(self.num_items)}
        for u, i in pos[:, :2].tolist():
            user_adj[u].add(i)
            item_adj[i].add(u)
        object.__setattr__(self, "user_adjacency", user_adj)
        object.__setattr__(self, "item_adjacency", item_adj)

    def _validate(self):
        inter, trip = self.interactions, self.triples
        if self.num_items > self.num_entities:
            raise ValidationError(
                f"num_items={self.num_items} exceeds num_entities={self.num_entities}")
        if len(inter):
            if inter[:, 0].min() < 0 or inter[:, 0].max() >= self.num_users:
                raise ValidationError("user id out of range")
            if inter[:, 1].min() < 0 or inter[:, 1].max() >= self.num_items:
                raise ValidationError("item id out of range")
            if not np.isin(inter[:, 2], (0, 1)).all():
                raise ValidationError("labels must be 0 or 1")
            pos = inter[inter[:, 2] == 1, :2]
            if len(np.unique(pos, axis=0)) != len(pos):
                raise ValidationError("duplicate positive (user, item) pairs")
        if len(trip):
            ents = trip[:, [0, 2]]
            if ents.min() < 0 or ents.max() >= self.num_entities:
                raise ValidationError("entity id out of range")
            if trip[:, 1].min() < 0 or trip[:, 1].max() >= self.num_relations:
                raise ValidationError("relation id out of range")

    @property
    def kg_adjacency(self) -> dict[int, list[tuple[int, int]]]:
        adj: dict[int, list[tuple[int, int]]] = {}
        for h, r, t in self.triples.tolist():
            adj.setdefault(h, []).append((r, t))
        return adj

    def out_degree(self) -> np.ndarray:
        return np.diff(self.kg_indptr)

    def positives(self) -> np.ndarray:
        return self.interactions[self.interactions[:, 2] == 1]

    def with_interactions(self, interactions: np.ndarray) -> CollaborativeKnowledgeGraph:
        """Same id spaces and KG, different interaction list (e.g. the train view)."""
        return CollaborativeKnowledgeGraph(
            self.num_users, self.num_items, self.num_entities, self.num_relations,
            interactions, self.triples, self.idmap)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.positives()[:, 0], minlength=self.num_users)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.positives()[:, 1], minlength=self.num_items)

    def same_as(self, other: CollaborativeKnowledgeGraph) -> bool:
        return (
            (self.num_users, self.num_items, self.num_entities, self.num_relations)
            == (other.num_users, other.num_items, other.num_entities, other.num_relations)
            and np.array_equal(self.interactions, other.interactions)
            and np.array_equal(self.triples, other.triples)
            and self.idmap == other.idmap
        )


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    split_seed: int


def _read_int_rows(path, ncols: tuple[int, ...]) -> tuple[np.ndarray, int]:
    rows = []
    width = None
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if width is None:
                if len(parts) not in ncols:
                    raise ParseError(path, lineno, f"expected {' or '.join(map(str, ncols))} columns, got {len(parts)}")
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(path, lineno, f"expected {width} columns, got {len(parts)}")
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise ParseError(path, lineno, f"non-integer field in {s!r}") from None
            if min(vals) < 0:
                raise ParseError(path, lineno, "negative id")
            rows.append(vals)
    if width is None:
        width = max(ncols)
    return np.asarray(rows, dtype=np.int64).reshape(-1, width), width


def _dedupe_interactions(inter: np.ndarray) -> np.ndarray:
    # keep first occurrence; a pair seen as positive drops any negative copy
    seen_pos = set(map(tuple, inter[inter[:, 2] == 1, :2].tolist()))
    keep, seen = [], set()
    for idx, (u, i, y) in enumerate(inter.tolist()):
        if (u, i, y) in seen or (y == 0 and (u, i) in seen_pos):
            continue
        seen.add((u, i, y))
        keep.append(idx)
    if len(keep) != len(inter):
        logger.warning("dropped %d duplicate or conflicting interactions", len(inter) - len(keep))
    return inter[keep]


def load_ckg(ratings_path, kg_path, *, labeled: bool | None = None, remap: bool = True,
             strict_items: bool = False, num_entities: int | None = None) -> CollaborativeKnowledgeGraph:
    """Read ``user item [label]`` and ``head relation tail`` files into a graph.

    With ``labeled=None`` the column count of the first data line decides;
    positives-only files get label 1. ``remap`` re-indexes every id space to a
    contiguous range (sorted by original id, items first in the entity
    space) and records the mapping in ``idmap``. ``strict_items`` rejects
    rated items that never occur in a non-empty KG; ``num_entities`` (only
    without remap) fixes the entity space and rejects items outside it.
    """
    ncols = (3,) if labeled else (2,) if labeled is False else (2, 3)
    raw, width = _read_int_rows(ratings_path, ncols)
    if width == 2:
        raw = np.column_stack([raw, np.ones(len(raw), dtype=np.int64)])
    elif len(raw) and not np.isin(raw[:, 2], (0, 1)).all():
        bad = int(np.flatnonzero(~np.isin(raw[:, 2], (0, 1)))[0])
        raise ParseError(ratings_path, _data_lineno(ratings_path, bad), "label must be 0 or 1")
    kg, _ = _read_int_rows(kg_path, (3,))

    if strict_items and len(kg):
        known = set(kg[:, 0].tolist()) | set(kg[:, 2].tolist())
        missing = sorted(set(raw[:, 1].tolist()) - known)
        if missing:
            raise ValidationError(f"item {missing[0]} present in ratings but absent from the entity space")

    if not remap:
        n_items = int(raw[:, 1].max()) + 1 if len(raw) else 0
        n_ent = max(n_items, int(kg[:, [0, 2]].max()) + 1 if len(kg) else 0)
        if num_entities is not None:
            if n_items > num_entities:
                raise ValidationError(
                    f"item {n_items - 1} present in ratings but absent from the entity space")
            n_ent = max(n_ent, num_entities)
        inter = _dedupe_interactions(raw)
        return CollaborativeKnowledgeGraph(
            int(raw[:, 0].max()) + 1 if len(raw) else 0, n_items, n_ent,
            int(kg[:, 1].max()) + 1 if len(kg) else 0, inter, kg)

    users = np.unique(raw[:, 0])
    items = np.unique(raw[:, 1])
    others = np.setdiff1d(np.unique(kg[:, [0, 2]]), items) if len(kg) else np.empty(0, np.int64)
    rels = np.unique(kg[:, 1]) if len(kg) else np.empty(0, np.int64)
    ent_orig = np.concatenate([items, others])
    user_map = {int(o): k for k, o in enumerate(users)}
    ent_map = {int(o): k for k, o in enumerate(ent_orig)}
    rel_map = {int(o): k for k, o in enumerate(rels)}

    inter = np.column_stack([
        np.searchsorted(users, raw[:, 0]),
        np.searchsorted(items, raw[:, 1]),
        raw[:, 2],
    ]).astype(np.int64) if len(raw) else np.empty((0, 3), np.int64)
    if len(kg):
        ent_sorted = np.argsort(ent_orig, kind="stable")
        lookup = lambda col: ent_sorted[np.searchsorted(ent_orig[ent_sorted], col)]
        trip = np.column_stack([lookup(kg[:, 0]), np.searchsorted(rels, kg[:, 1]), lookup(kg[:, 2])])
    else:
        trip = np.empty((0, 3), np.int64)
    idmap = {
        "user": user_map,
        "item": {int(o): k for k, o in enumerate(items)},
        "entity": {o: k for o, k in ent_map.items() if k >= len(items)},
        "relation": rel_map,
    }
    return CollaborativeKnowledgeGraph(
        len(users), len(items), len(ent_orig), len(rels), _dedupe_interactions(inter), trip, idmap)


def _data_lineno(path, data_index: int) -> int:
    n = -1
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                n += 1
                if n == data_index:
                    return lineno
    return 0


def write_idmap(g: CollaborativeKnowledgeGraph, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# kind\toriginal\tinternal\n")
        for kind in ID_KINDS:
            for orig, internal in sorted(g.idmap.get(kind, {}).items(), key=lambda kv: kv[1]):
                fh.write(f"{kind}\t{orig}\t{internal}\n")


def read_idmap(path) -> dict:
    out: dict = {k: {} for k in ID_KINDS}
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split("\t")
            if len(parts) != 3 or parts[0] not in out:
                raise ParseError(path, lineno, "expected kind<TAB>original<TAB>internal")
            out[parts[0]][int(parts[1])] = int(parts[2])
    return out


def write_triples(rows: np.ndarray, path, header: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# {header}\n")
        for row in np.asarray(rows).tolist():
            fh.write("\t".join(map(str, row)) + "\n")


def _largest_remainder(total: int, ratios) -> list[int]:
    """Integer parts of ``total`` proportional to ``ratios``, each within 1 of its ideal."""
    ideal = [total * r for r in ratios]
    quota = [math.floor(x) for x in ideal]
    order = sorted(range(len(ratios)), key=lambda p: (-(ideal[p] - quota[p]), p))
    for p in order[: total - sum(quota)]:
        quota[p] += 1
    return quota


def _split_quotas(sizes: list[int], ratios) -> list[list[int]]:
    """Per-class part sizes: every cell is the floor or ceiling of ``size * ratio``,
    rows sum to the class sizes and columns to the largest-remainder split of the total.

    Ratios are taken as exact fractions; among feasible roundings the one
    rounding up the largest fractional parts wins (ties to the earlier cell).
    """
    fr = [Fraction(r).limit_denominator(10_000) for r in ratios]
    fr = [r / sum(fr) for r in fr]
    cols = _largest_remainder(sum(sizes), fr)
    ideal = [[n * r for r in fr] for n in sizes]
    base = [[math.floor(x) for x in row] for row in ideal]
    row_need = [n - sum(b) for n, b in zip(sizes, base)]
    col_need = [cols[p] - sum(b[p] for b in base) for p in range(len(fr))]
    cells = [(c, p) for c in range(len(sizes)) for p in range(len(fr))]
    best, best_key = None, None
    for bits in itertools.product((0, 1), repeat=len(cells)):
        add = dict(zip(cells, bits))
        if any(sum(add[c, p] for p in range(len(fr))) != row_need[c] for c in range(len(sizes))):
            continue
        if any(sum(add[c, p] for c in range(len(sizes))) != col_need[p] for p in range(len(fr))):
            continue
        key = (sum(ideal[c][p] - base[c][p] for (c, p), b in add.items() if b), [-b for b in bits])
        if best_key is None or key > best_key:
            best, best_key = add, key
    if best is None:  # unreachable for two classes and three parts; kept as a guard
        raise ValueError(f"no consistent rounding of class sizes {sizes}")
    return [[base[c][p] + best[c, p] for p in range(len(fr))] for c in range(len(sizes))]


def split_dataset(g: CollaborativeKnowledgeGraph, seed: int,
                  ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> DatasetSplit:
    """Random label-stratified split; users with two or more positives keep one in train."""
    inter = g.interactions
    if len(inter) < 5:
        raise ValueError(f"need at least 5 interactions to split, got {len(inter)}")
    rng = np.random.default_rng(seed)
    classes = [np.flatnonzero(inter[:, 2] == 1), np.flatnonzero(inter[:, 2] == 0)]
    quotas = _split_quotas([len(c) for c in classes], ratios)

    parts = ([], [], [])
    for c, idx in enumerate(classes):
        perm = rng.permutation(idx)
        n_train, n_val, _ = quotas[c]
        if c == 0:
            users = inter[perm, 0]
            counts = np.bincount(users, minlength=g.num_users)
            _, first = np.unique(users, return_index=True)
            anchor = np.zeros(len(perm), dtype=bool)
            anchor[first[counts[users[first]] >= 2]] = True
            perm = np.concatenate([perm[anchor], perm[~anchor]])
            if anchor.sum() > n_train:
                warnings.warn("more anchored users than train slots; coverage not guaranteed")
        parts[0].append(perm[:n_train])
        parts[1].append(perm[n_train:n_train + n_val])
        parts[2].append(perm[n_train + n_val:])
    train, val, test = (inter[np.sort(np.concatenate(p))] for p in parts)
    return DatasetSplit(_frozen(train), _frozen(val), _frozen(test), seed)


def sample_negatives(g: CollaborativeKnowledgeGraph, split: DatasetSplit | np.ndarray,
                     seed) -> np.ndarray:
    """One uniformly drawn unobserved item per training positive, per user.

    Falls back to sampling with replacement (and warns) when a user has too
    few unobserved items; a user who interacted with everything draws from
    the full catalog.
    """
    train = split.train if isinstance(split, DatasetSplit) else np.asarray(split)
    pos = train[train[:, 2] == 1]
    counts = np.bincount(pos[:, 0], minlength=g.num_users)
    rng = np.random.default_rng(seed)
    all_items = np.arange(g.num_items)
    out = []
    for u in np.flatnonzero(counts).tolist():
        need = int(counts[u])
        seen = np.fromiter(g.user_adjacency[u], dtype=np.int64)
        cand = np.setdiff1d(all_items, seen, assume_unique=True)
        if len(cand) == 0:
            warnings.warn(f"user {u} interacted with every item; negatives drawn from the full catalog",
                          NegativeSamplingWarning, stacklevel=2)
            picks = rng.choice(all_items, need, replace=True)
        elif len(cand) < need:
            warnings.warn(f"user {u} has {len(cand)} unobserved items for {need} negatives; sampling with replacement",
                          NegativeSamplingWarning, stacklevel=2)
            picks = rng.choice(cand, need, replace=True)
        else:
            picks = rng.choice(cand, need, replace=False)
        out.append(np.column_stack([np.full(need, u), picks, np.zeros(need, dtype=np.int64)]))
    if not out:
        return np.empty((0, 3), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def load_prepared(prepared_dir) -> tuple[CollaborativeKnowledgeGraph, DatasetSplit]:
    """Rebuild the graph and split written by the ``prepare`` command."""
    import json

    d = Path(prepared_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    counts = manifest["counts"]
    parts = []
    for name in ("train", "val", "test"):
        rows, _ = _read_int_rows(d / f"{name}.tsv", (3,))
        parts.append(rows)
    kg, _ = _read_int_rows(d / "kg.tsv", (3,))
    idmap = read_idmap(d / "idmap.tsv") if (d / "idmap.tsv").exists() else {}
    g = CollaborativeKnowledgeGraph(
        counts["users"], counts["items"], counts["entities"], counts["relations"],
        np.concatenate(parts), kg, idmap)
    return g, DatasetSplit(*parts, split_seed=manifest["seed"])


def with_sampled_negatives(g: CollaborativeKnowledgeGraph, seed) -> CollaborativeKnowledgeGraph:
    """Attach one sampled negative per positive when the graph has no negatives."""
    if (g.interactions[:, 2] == 0).any():
        return g
    neg = sample_negatives(g, g.interactions, seed)
    return g.with_interactions(np.concatenate([g.interactions, neg]))
