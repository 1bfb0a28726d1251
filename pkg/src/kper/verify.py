"""Self-checks: finite-difference gradients, hard-concrete law, sparsity penalty, metric oracle."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import oracle
from .data import split_dataset
from .evaluation import ctr_auc, psr_at_k, rank_topk, topk_metrics
from .referencing import draw_uniform, gate_open_probability, sample_gates
from .scoring import sparsity_penalty
from .synthetic import fixture_ckg
from .training import TrainConfig, Trainer

SUITES = ("gradients", "gates", "sparsity", "metrics")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.seconds:.1f}s)"


def fixture_trainer(seed: int = 0, **overrides) -> Trainer:
    """Trainer on the 10-user / 10-item / 20-entity / 30-triple fixture, d=8, K=2, l=4, |S|=8."""
    g = fixture_ckg(seed)
    split = split_dataset(g, seed)
    cfg = dict(d=8, K=2, l=4, seeds_per_side=4, seed_exclusion_quantile=0.0, dtype="float64",
               rng_seed=seed, lambda1=1e-3, lambda2=1e-4)
    cfg.update(overrides)
    return Trainer(g, split, TrainConfig(**cfg))


def gradient_errors(trainer: Trainer, step: float = 1e-5, corrupt: bool = False) -> dict[str, float]:
    """Norm-wise relative error between autograd and central differences, per parameter group.

    The loss is the full objective on the training rows with deterministic
    gates. A group whose true gradient is zero (the attention output bias,
    which every softmax cancels) leaves only rounding noise in the
    differences; when both gradients sit below that noise floor the error is
    reported as 0.
    """
    rows = np.concatenate([trainer.split.train[trainer.split.train[:, 2] == 1],
                           trainer.split.train[trainer.split.train[:, 2] == 0]])
    users, items, labels = (torch.from_numpy(rows[:, j].copy()) for j in range(3))
    nb = trainer.neighborhoods(1)
    params = trainer.params.tensors()

    def loss() -> torch.Tensor:
        return trainer.batch_loss(users, items, labels, nb, None, gates="deterministic")[0].total

    trainer.params.requires_grad_(True)
    total = loss()
    analytic = torch.autograd.grad(total, list(params.values()), allow_unused=True)
    eps = torch.finfo(total.dtype).eps
    noise = 100 * eps * max(1.0, abs(float(total.detach()))) / step
    trainer.params.requires_grad_(False)
    errors = {}
    with torch.no_grad():
        for (name, p), a in zip(params.items(), analytic):
            a = torch.zeros_like(p) if a is None else a.clone()
            if corrupt and name == "gate_query":
                a = a + 1e-2 * torch.ones_like(a)
            fd = torch.zeros_like(p)
            flat, fflat = p.view(-1), fd.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + step
                up = float(loss())
                flat[j] = orig - step
                down = float(loss())
                flat[j] = orig
                fflat[j] = (up - down) / (2 * step)
            na, nf = float(a.norm()), float(fd.norm())
            scale = max(na, nf)
            floor = noise * math.sqrt(p.numel())
            errors[name] = 0.0 if scale < floor else float((a - fd).norm()) / scale
    return errors


def suite_gradients(seed: int = 0, points: int = 5, tol: float = 1e-4, corrupt: bool = False) -> SuiteResult:
    res = SuiteResult("gradients", True)
    for k in range(points):
        tr = fixture_trainer(seed, rng_seed=seed * 1000 + k)
        errs = gradient_errors(tr, corrupt=corrupt)
        worst = max(errs, key=errs.get)
        ok = all(v < tol for v in errs.values())
        res.passed &= ok
        res.details.append(f"point {k}: max relative error {errs[worst]:.2e} ({worst})")
    return res


def gate_law_cells(draws: int = 100_000, seed: int = 0):
    """Empirical vs analytic P(z_bar > 0) over the beta x tau x eta grid."""
    gen = torch.Generator().manual_seed(seed)
    out = []
    for beta, tau, eta in itertools.product((0.5, 1.0, 2.0), (0.5, 1.0), (-1.0, -0.5, -0.1)):
        b = torch.full((draws,), beta, dtype=torch.float64)
        z = sample_gates(b, tau, eta, draw_uniform(b.shape, gen)).z_bar
        emp = float((z > 0).double().mean())
        p = float(gate_open_probability(torch.tensor(beta, dtype=torch.float64), tau, eta))
        se = math.sqrt(p * (1 - p) / draws)
        out.append((beta, tau, eta, emp, p, se))
    return out


def suite_gates(seed: int = 0, draws: int = 100_000) -> SuiteResult:
    res = SuiteResult("gates", True)
    for beta, tau, eta, emp, p, se in gate_law_cells(draws, seed):
        ok = abs(emp - p) <= 3 * se
        res.passed &= ok
        res.details.append(f"beta={beta} tau={tau} eta={eta}: empirical {emp:.5f} analytic {p:.5f} "
                           f"({abs(emp - p) / se:.2f} se){'' if ok else ' FAIL'}")
    return res


def sparsity_consistency(beta: torch.Tensor, tau: float, eta: float, draws: int = 100_000, seed: int = 0):
    """(analytic penalty, Monte Carlo sum of open probabilities, its standard error)."""
    gen = torch.Generator().manual_seed(seed)
    flat = beta.detach().reshape(-1).to(torch.float64)
    opened = torch.zeros_like(flat)
    chunk = max(1, 4_000_000 // max(flat.numel(), 1))
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        b = flat.expand(n, -1)
        opened += (sample_gates(b, tau, eta, draw_uniform(b.shape, gen)).z_bar > 0).sum(0)
        done += n
    p_hat = opened / draws
    p_true = gate_open_probability(flat, tau, eta)
    se = math.sqrt(float((p_true * (1 - p_true)).sum()) / draws)
    return float(sparsity_penalty(flat, tau, eta)), float(p_hat.sum()), se


def suite_sparsity(seed: int = 0, draws: int = 100_000) -> SuiteResult:
    res = SuiteResult("sparsity", True)
    tr = fixture_trainer(seed)
    c = tr.config
    rows = tr.split.train
    with torch.no_grad():
        out = tr.model.forward(rows[:, 0], rows[:, 1], tr.neighborhoods(1))
    for name, beta in (("user", out.user.beta), ("item", out.item.beta)):
        analytic, mc, se = sparsity_consistency(beta, c.tau, c.eta, draws, seed)
        ok = abs(analytic - mc) <= 3 * se
        res.passed &= ok
        res.details.append(f"{name} batch: penalty {analytic:.4f} vs Monte Carlo {mc:.4f} (se {se:.4f})")
    return res


def metric_comparisons(fx: oracle.RankingFixture, ks=(1, 2, 3, 5)):
    """Yield (label, fast value, oracle value) for every metric on one fixture."""
    top = {u: rank_topk(np.asarray(s), fx.seen.get(u, set()), max(ks)) for u, s in fx.scores.items()}
    test = {u: v for u, v in fx.test.items() if v}
    fast = topk_metrics(top, test, ks)
    for k in ks:
        r, p = oracle.oracle_recall_precision(fx, k)
        yield f"recall@{k}", fast[k][0], float(r)
        yield f"precision@{k}", fast[k][1], float(p)
        for beta in (0.0, 0.1):
            yield f"psr@{k} beta={beta}", psr_at_k(top, test, np.asarray(fx.train_counts), k, beta), \
                float(oracle.oracle_psr(fx, k, beta))
        yield f"psr@{k} beta=0 vs micro recall", psr_at_k(top, test, np.asarray(fx.train_counts), k, 0.0), \
            float(oracle.oracle_micro_recall(fx, k))
    yield "auc", ctr_auc(fx.auc_labels, fx.auc_scores), float(oracle.oracle_auc(fx.auc_labels, fx.auc_scores))


def suite_metrics(seed: int = 0) -> SuiteResult:
    res = SuiteResult("metrics", True)
    for fx in oracle.ranking_fixtures():
        bad = [(lab, a, b) for lab, a, b in metric_comparisons(fx) if a != b]
        res.passed &= not bad
        res.details.append(f"{fx.name}: " + ("all equal" if not bad else
                                              "; ".join(f"{lab} {a!r} != {b!r}" for lab, a, b in bad)))
    return res


def run_suites(names=SUITES, seed: int = 0, corrupt_gradient: bool = False) -> list[SuiteResult]:
    fns = {"gradients": lambda: suite_gradients(seed, corrupt=corrupt_gradient),
           "gates": lambda: suite_gates(seed), "sparsity": lambda: suite_sparsity(seed),
           "metrics": lambda: suite_metrics(seed)}
    out = []
    for name in names:
        t0 = time.perf_counter()
        r = fns[name]()
        r.seconds = time.perf_counter() - t0
        out.append(r)
    return out


__all__ = ["SUITES", "SuiteResult", "run_suites", "gradient_errors", "gate_law_cells", "sparsity_consistency",
           "metric_comparisons", "fixture_trainer"]
