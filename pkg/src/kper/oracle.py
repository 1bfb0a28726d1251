"""Brute-force metric definitions and hand-built ranking fixtures.

Deliberately naive: plain Python loops, exact fractions, pairwise AUC. Kept
free of any import from the fast evaluation path so the two can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction


@dataclass
class RankingFixture:
    name: str
    num_items: int
    scores: dict[int, list[float]]          # user -> score per item
    seen: dict[int, set[int]]               # user -> items excluded from ranking
    test: dict[int, set[int]]               # user -> test positives
    train_counts: list[int]                 # training positives per item
    auc_labels: list[int]
    auc_scores: list[float]


def oracle_ranking(scores: list[float], excluded: set[int]) -> list[int]:
    cands = [i for i in range(len(scores)) if i not in excluded]
    return sorted(cands, key=lambda i: (-scores[i], i))


def oracle_recall_precision(fx: RankingFixture, k: int) -> tuple[Fraction, Fraction]:
    users = [u for u in sorted(fx.test) if fx.test[u]]
    rec, prec = Fraction(0), Fraction(0)
    for u in users:
        top = oracle_ranking(fx.scores[u], fx.seen.get(u, set()))[:k]
        hits = sum(1 for i in top if i in fx.test[u])
        rec += Fraction(hits, len(fx.test[u]))
        prec += Fraction(hits, k)
    return rec / len(users), prec / len(users)


def oracle_auc(labels: list[int], scores: list[float]) -> Fraction:
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    won = Fraction(0)
    for a in pos:
        for b in neg:
            won += 1 if a > b else Fraction(1, 2) if a == b else 0
    return won / (len(pos) * len(neg))


def oracle_psr(fx: RankingFixture, k: int, beta: float):
    users = [u for u in sorted(fx.test) if fx.test[u]]
    weight = lambda i: (1.0 / max(fx.train_counts[i], 1)) ** beta
    num, den = [], []
    for u in users:
        top = oracle_ranking(fx.scores[u], fx.seen.get(u, set()))[:k]
        num += [weight(i) for i in top if i in fx.test[u]]
        den += [weight(i) for i in fx.test[u]]
    if beta == 0:
        return Fraction(len(num), len(den))
    return math.fsum(num) / math.fsum(den)


def oracle_micro_recall(fx: RankingFixture, k: int) -> Fraction:
    hit = total = 0
    for u in sorted(fx.test):
        top = oracle_ranking(fx.scores[u], fx.seen.get(u, set()))[:k]
        hit += sum(1 for i in top if i in fx.test[u])
        total += len(fx.test[u])
    return Fraction(hit, total)


def ranking_fixtures() -> list[RankingFixture]:
    """Three small ranking problems: a single user, tied scores, and exclusions."""
    single = RankingFixture(
        "single-user", 4, {0: [0.9, 0.1, 0.5, 0.3]}, {0: set()}, {0: {0}}, [1, 1, 1, 1],
        [1, 0, 1, 0], [0.9, 0.1, 0.5, 0.3])
    ties = RankingFixture(
        "ties", 6,
        {0: [0.5, 0.5, 0.5, 0.2, 0.2, 0.9], 1: [1.0, 1.0, 0.0, 0.0, 1.0, 1.0], 2: [0.0] * 6},
        {0: {5}, 1: {0}, 2: set()},
        {0: {1, 3}, 1: {4, 2}, 2: {5}},
        [3, 0, 1, 10, 2, 7],
        [1, 1, 0, 0, 1, 0, 0], [0.3, 0.7, 0.3, 0.1, 0.7, 0.7, 0.2])
    excl = RankingFixture(
        "exclusions", 8,
        {0: [0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1],
         1: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
         2: [0.3, 0.9, 0.3, 0.9, 0.1, 0.1, 0.6, 0.6],
         3: [0.5] * 8},
        {0: {0, 1}, 1: {7, 6, 5}, 2: {1}, 3: {0, 1, 2, 3}},
        {0: {2, 7}, 1: {0, 4}, 2: {3, 6, 2}, 3: set()},
        [100, 1, 0, 5, 20, 2, 1, 9],
        [0, 1, 1, 0, 1, 0, 1, 0], [0.2, 0.9, 0.4, 0.4, 0.6, 0.1, 0.4, 0.8])
    return [single, ties, excl]
