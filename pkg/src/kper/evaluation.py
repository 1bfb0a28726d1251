"""Top-K ranking metrics, CTR AUC, popularity-stratified recall and cold-user groups.

Aggregates are accumulated as exact rationals and rounded to float once, so
they match integer-ratio oracles exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .data import CollaborativeKnowledgeGraph, DatasetSplit

TOPK_SWEEP = (1, 5, 10, 20, 50, 100)
GROUP_NAMES = ("warm", "normal", "cold")


def positives_by_user(rows: np.ndarray) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for u, i in np.asarray(rows)[np.asarray(rows)[:, 2] == 1, :2].tolist():
        out.setdefault(u, set()).add(i)
    return out


def rank_topk(scores: np.ndarray, exclude=(), k: int = 100) -> np.ndarray:
    """Top ``k`` item ids by descending score, ties to the lower id, excluded ids skipped."""
    s = np.asarray(scores, dtype=np.float64).copy()
    ex = np.fromiter(exclude, dtype=np.int64) if exclude else np.empty(0, np.int64)
    keep = np.ones(len(s), dtype=bool)
    keep[ex] = False
    ids = np.flatnonzero(keep)
    order = np.lexsort((ids, -s[ids]))
    return ids[order[:k]]


def rank_users(scorer, users, exclude: dict[int, set[int]], k: int, batch: int = 64) -> dict[int, np.ndarray]:
    users = list(users)
    out = {}
    for s in range(0, len(users), batch):
        chunk = users[s:s + batch]
        mat = scorer(np.asarray(chunk, dtype=np.int64))
        for row, u in zip(mat, chunk):
            out[u] = rank_topk(row, exclude.get(u, ()), k)
    return out


def topk_metrics(topk: dict[int, np.ndarray], test_positives: dict[int, set[int]],
                 ks=TOPK_SWEEP) -> dict[int, tuple[float, float]]:
    """Recall@K and Precision@K averaged over users with at least one test positive."""
    users = [u for u in sorted(test_positives) if test_positives[u]]
    if not users:
        raise ValueError("no user has a test positive")
    out = {}
    for k in ks:
        rec = prec = Fraction(0)
        for u in users:
            hits = len(set(topk[u][:k].tolist()) & test_positives[u])
            rec += Fraction(hits, len(test_positives[u]))
            prec += Fraction(hits, k)
        out[k] = (float(rec / len(users)), float(prec / len(users)))
    return out


def ctr_auc(labels, scores) -> float:
    """Probability a random positive outscores a random negative; ties count one half."""
    y = np.asarray(labels).astype(int)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when the evaluation set has a single class")
    # average ranks are half-integers, so twice the rank sum is an exact integer
    twice = int(np.rint(2 * rankdata(s, method="average")[y == 1]).astype(np.int64).sum())
    u2 = twice - n_pos * (n_pos + 1)
    return float(Fraction(u2, 2 * n_pos * n_neg))


def item_weights(item_train_counts: np.ndarray, beta_exp: float) -> np.ndarray:
    n = np.maximum(np.asarray(item_train_counts, dtype=np.float64), 1.0)
    return (1.0 / n) ** beta_exp


def psr_at_k(topk: dict[int, np.ndarray], test_positives: dict[int, set[int]],
             item_train_counts: np.ndarray, k: int, beta_exp: float = 0.1) -> float:
    """Popularity-stratified recall: hits weighted by (1 / N+)^beta over all users.

    Items never seen as positives in training count as N+ = 1.
    """
    users = [u for u in sorted(test_positives) if test_positives[u]]
    if not users:
        raise ValueError("empty test set")
    if beta_exp == 0:
        hit = sum(len(set(topk[u][:k].tolist()) & test_positives[u]) for u in users)
        return float(Fraction(hit, sum(len(test_positives[u]) for u in users)))
    counts = np.asarray(item_train_counts)
    # correctly rounded sums, independent of summation order
    w = lambda i: (1.0 / max(int(counts[i]), 1)) ** beta_exp
    num = math.fsum(w(i) for u in users for i in set(topk[u][:k].tolist()) & test_positives[u])
    den = math.fsum(w(i) for u in users for i in test_positives[u])
    return num / den


def cold_user_groups(user_degrees, users=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Warm / normal / cold users holding roughly a third of the interactions each.

    Users are visited by descending degree (ties by id) and a group closes
    as soon as the running total reaches its share; a heavy user can push a
    group past its share. At least one user is kept for every later group.
    """
    deg = np.asarray(user_degrees, dtype=np.int64)
    ids = np.arange(len(deg)) if users is None else np.asarray(users, dtype=np.int64)
    if len(ids) < 3:
        raise ValueError("need at least 3 users to form 3 groups")
    order = ids[np.lexsort((ids, -deg[ids]))]
    total = int(deg[order].sum())
    groups: list[list[int]] = [[], [], []]
    g, cum = 0, 0
    for pos, u in enumerate(order.tolist()):
        groups[g].append(u)
        cum += int(deg[u])
        remaining = len(order) - pos - 1
        if g < 2 and groups[g] and (3 * cum >= (g + 1) * total or remaining == 2 - g):
            g += 1
    return tuple(np.asarray(x, dtype=np.int64) for x in groups)


def popularity_scorer(train: np.ndarray, num_items: int):
    """Baseline ranking every item by its count of training positives."""
    pos = train[train[:, 2] == 1]
    counts = np.bincount(pos[:, 1], minlength=num_items).astype(np.float64)

    def score(user_ids):
        return np.broadcast_to(counts, (len(user_ids), num_items))

    return score


@dataclass
class EvaluationReport:
    topk: dict[int, tuple[float, float]]
    auc: float | None
    psr: dict[int, float]
    psr_beta: float
    groups: dict[str, float]
    group_sizes: dict[str, int]
    group_interactions: dict[str, int]
    metadata: dict = field(default_factory=dict)

    def rows(self):
        for k, (r, p) in sorted(self.topk.items()):
            yield "recall", k, "all", r
            yield "precision", k, "all", p
        if self.auc is not None:
            yield "auc", 0, "all", self.auc
        for k, v in sorted(self.psr.items()):
            yield "psr", k, "all", v
        for name in GROUP_NAMES:
            if name in self.groups:
                yield "recall", 10, name, self.groups[name]

    def to_tsv(self) -> str:
        lines = ["metric\tK\tgroup\tvalue"]
        lines += [f"{m}\t{k}\t{g}\t{v!r}" for m, k, g, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        out = [f"{'K':>5} {'Recall':>9} {'Precision':>9}"]
        for k, (r, p) in sorted(self.topk.items()):
            out.append(f"{k:>5} {100 * r:>8.2f}% {100 * p:>8.2f}%")
        if self.auc is not None:
            out.append(f"AUC {100 * self.auc:.2f}%")
        for k, v in sorted(self.psr.items()):
            out.append(f"PSR@{k} (beta={self.psr_beta}) {100 * v:.2f}%")
        for name in GROUP_NAMES:
            if name in self.groups:
                out.append(f"Recall@10 {name:<6} {100 * self.groups[name]:.2f}%  "
                           f"users={self.group_sizes[name]} interactions={self.group_interactions[name]}")
        for key, val in self.metadata.items():
            out.append(f"{key}: {val}")
        return "\n".join(out) + "\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:12]


def evaluate(scorer, g: CollaborativeKnowledgeGraph, split: DatasetSplit, *, ks=TOPK_SWEEP,
             pair_scorer=None, psr_k=(10,), psr_beta: float = 0.1, metadata: dict | None = None,
             on: str = "test") -> EvaluationReport:
    """Full-catalog ranking on ``on`` ('test' or 'validation') plus AUC, PSR and cold groups.

    Candidates exclude the user's training positives, and for the test set
    also the validation positives. ``pair_scorer(users, items)`` enables AUC.
    """
    target = split.test if on == "test" else split.validation
    seen = [split.train] + ([split.validation] if on == "test" else [])
    exclude = positives_by_user(np.concatenate(seen))
    test_pos = positives_by_user(target)
    users = sorted(test_pos)
    kmax = max(max(ks), max(psr_k), 10)
    top = rank_users(scorer, users, exclude, kmax)

    item_counts = np.bincount(split.train[split.train[:, 2] == 1, 1], minlength=g.num_items)
    user_deg = np.bincount(split.train[split.train[:, 2] == 1, 0], minlength=g.num_users)

    auc = None
    if pair_scorer is not None and len(np.unique(target[:, 2])) == 2:
        auc = ctr_auc(target[:, 2], pair_scorer(target[:, 0], target[:, 1]))

    groups, sizes, inter = {}, {}, {}
    if g.num_users >= 3:
        for name, members in zip(GROUP_NAMES, cold_user_groups(user_deg)):
            sizes[name] = len(members)
            inter[name] = int(user_deg[members].sum())
            sub = {u: test_pos[u] for u in members.tolist() if u in test_pos}
            if sub:
                groups[name] = topk_metrics(top, sub, (10,))[10][0]
    return EvaluationReport(
        topk=topk_metrics(top, test_pos, ks),
        auc=auc,
        psr={k: psr_at_k(top, test_pos, item_counts, k, psr_beta) for k in psr_k},
        psr_beta=psr_beta,
        groups=groups, group_sizes=sizes, group_interactions=inter,
        metadata=dict(metadata or {}),
    )


def recall_at(scorer, split: DatasetSplit, k: int = 10, on: str = "validation") -> float:
    """Recall@k on the validation (default) or test positives; used for model selection."""
    target = split.validation if on == "validation" else split.test
    seen = [split.train] + ([split.validation] if on == "test" else [])
    exclude = positives_by_user(np.concatenate(seen))
    pos = positives_by_user(target)
    top = rank_users(scorer, sorted(pos), exclude, k)
    return topk_metrics(top, pos, (k,))[k][0]
