"""Latent-factor synthetic collaborative knowledge graphs for tests and timing runs."""

from __future__ import annotations

import numpy as np

from .data import CollaborativeKnowledgeGraph


def synthetic_ckg(num_users: int = 10, num_items: int = 10, num_entities: int = 20, num_triples: int = 30,
                  num_relations: int = 3, per_user: int | tuple[int, int] = 3, factors: int = 4,
                  seed: int = 0, negatives: bool = True) -> CollaborativeKnowledgeGraph:
    """Users prefer items close in a latent space; KG attributes mirror item factors.

    Every user gets ``per_user`` positives (or a count drawn from the given
    inclusive range) sampled from a softmax over latent affinities, so
    preferences carry collaborative and knowledge signal. Triples connect
    items to attribute entities of their latent cluster and attributes to
    each other. With ``negatives`` one unobserved item per positive is added
    with label 0.
    """
    if num_entities <= num_items:
        raise ValueError("need attribute entities beyond the items")
    rng = np.random.default_rng(seed)
    item_f = rng.normal(size=(num_items, factors))
    user_f = rng.normal(size=(num_users, factors))
    n_attr = num_entities - num_items
    attr_f = rng.normal(size=(n_attr, factors))

    rows = []
    for u in range(num_users):
        k = per_user if isinstance(per_user, int) else int(rng.integers(per_user[0], per_user[1] + 1))
        k = min(k, num_items)
        logits = 2.0 * item_f @ user_f[u]
        p = np.exp(logits - logits.max())
        chosen = rng.choice(num_items, k, replace=False, p=p / p.sum())
        rows += [(u, int(i), 1) for i in chosen]
    inter = np.asarray(rows, dtype=np.int64)

    trip = set()
    aff = item_f @ attr_f.T
    attempts = 0
    while len(trip) < num_triples and attempts < 100 * num_triples:
        attempts += 1
        if rng.random() < 0.75:
            h = int(rng.integers(num_items))
            w = np.exp(aff[h] - aff[h].max())
            t = num_items + int(rng.choice(n_attr, p=w / w.sum()))
            r = int(np.argmax(item_f[h, : num_relations]) % num_relations) if num_relations else 0
        else:
            h = num_items + int(rng.integers(n_attr))
            t = int(rng.integers(num_entities))
            r = int(rng.integers(num_relations))
        if h != t:
            trip.add((h, r, t))
    triples = np.asarray(sorted(trip), dtype=np.int64).reshape(-1, 3)

    if negatives:
        neg = []
        for u in range(num_users):
            seen = set(inter[inter[:, 0] == u, 1].tolist())
            cand = np.asarray([i for i in range(num_items) if i not in seen])
            need = len(seen)
            if len(cand):
                picks = rng.choice(cand, need, replace=len(cand) < need)
                neg += [(u, int(i), 0) for i in picks]
        if neg:
            inter = np.concatenate([inter, np.asarray(neg, dtype=np.int64)])
            # a repeated negative pair carries no extra information
            inter = np.unique(inter, axis=0)
    return CollaborativeKnowledgeGraph(num_users, num_items, num_entities, num_relations, inter, triples)


def fixture_ckg(seed: int = 0) -> CollaborativeKnowledgeGraph:
    """10 users, 10 items, 20 entities, 30 triples."""
    return synthetic_ckg(10, 10, 20, 30, 3, per_user=3, seed=seed)


def lastfm_shaped(seed: int = 0) -> CollaborativeKnowledgeGraph:
    """Synthetic graph with the size of the Last.FM benchmark (1,872 users, 3,846 items, 9,366 entities)."""
    return synthetic_ckg(1872, 3846, 9366, 15518, 60, per_user=(2, 21), factors=16, seed=seed)


def write_raw(g: CollaborativeKnowledgeGraph, directory, ratings_name: str = "ratings.tsv",
              kg_name: str = "kg.tsv") -> tuple[str, str]:
    """Write a graph as ``user item label`` and ``head relation tail`` text files."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    r, k = d / ratings_name, d / kg_name
    r.write_text("".join(f"{u}\t{i}\t{y}\n" for u, i, y in g.interactions.tolist()))
    k.write_text("".join(f"{h}\t{rel}\t{t}\n" for h, rel, t in g.triples.tolist()))
    return str(r), str(k)
