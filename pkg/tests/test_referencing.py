import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kper.data import CollaborativeKnowledgeGraph
from kper.referencing import (
    SeedPool, build_seed_pool, deterministic_gates, draw_uniform, gate_open_probability, gated_aggregate,
    referencing_embedding, sample_gates, selection_scores,
)

D64 = torch.float64


def graph_with_degrees(user_deg, item_deg=None):
    rows = []
    n_items = max(max(user_deg), 1)
    for u, k in enumerate(user_deg):
        rows += [(u, i, 1) for i in range(k)]
    return CollaborativeKnowledgeGraph(len(user_deg), n_items, n_items, 0, rows, np.empty((0, 3)))


def test_seed_pool_hand_degrees():
    # user degrees 0..9 shuffled; bottom 10% (degree 0) excluded, top 3 kept
    deg = [3, 9, 0, 5, 9, 1, 7, 2, 4, 6]
    g = graph_with_degrees(deg)
    pool = build_seed_pool(g, 3, 0.1)
    assert pool.user_seeds.tolist() == [1, 4, 6]
    assert pool.user_degrees.tolist() == [9, 9, 7]
    # item i is used by every user with degree > i
    assert pool.item_seeds.tolist() == [0, 1, 2]


def test_seed_pool_ties_to_lower_ids():
    g = graph_with_degrees([2] * 10)
    with pytest.warns(UserWarning, match="items"):
        assert build_seed_pool(g, 4, 0.0).user_seeds.tolist() == [0, 1, 2, 3]


def test_seed_pool_shrinks_with_warning():
    g = graph_with_degrees([1, 0, 2])
    with pytest.warns(UserWarning, match="shrinking"):
        pool = build_seed_pool(g, 5, 0.1)
    assert pool.user_seeds.tolist() == [2, 0]


def test_seed_pool_tsv_round_trip(tmp_path):
    g = graph_with_degrees([3, 9, 0, 5, 9, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pool = build_seed_pool(g, 4, 0.1)
    pool.write_tsv(tmp_path / "seeds.tsv")
    back = SeedPool.read_tsv(tmp_path / "seeds.tsv")
    for f in ("user_seeds", "item_seeds", "user_degrees", "item_degrees"):
        assert np.array_equal(getattr(pool, f), getattr(back, f))
    slots = pool.slots(0, 6)
    assert all(slots[s] == k for k, s in enumerate(pool.user_seeds.tolist()))


def test_selection_scores():
    v = torch.randn(3, 4, dtype=D64)
    assert torch.equal(selection_scores(torch.zeros(2, 4, dtype=D64), torch.zeros(2, dtype=D64), v),
                       torch.ones(3, 2, dtype=D64))
    w = torch.zeros(1, 4, dtype=D64)
    b = torch.tensor([math.log(2)], dtype=D64)
    assert torch.allclose(selection_scores(w, b, v), torch.full((3, 1), 2.0, dtype=D64))
    gen = torch.Generator().manual_seed(0)
    w, b, x = torch.randn(4, 4, generator=gen, dtype=D64), torch.randn(4, generator=gen, dtype=D64), \
        torch.randn(4, generator=gen, dtype=D64)
    expected = [math.exp(sum(float(w[s, j]) * float(x[j]) for j in range(4)) + float(b[s])) for s in range(4)]
    assert np.allclose(selection_scores(w, b, x).tolist(), expected, rtol=1e-13)
    huge = selection_scores(torch.full((1, 4), 100.0, dtype=D64), torch.zeros(1, dtype=D64), torch.ones(4, dtype=D64))
    assert float(huge) == math.exp(30)


def test_gate_examples():
    one = torch.ones(1, dtype=D64)
    half = torch.full((1,), 0.5, dtype=D64)
    s = sample_gates(one, 2 / 3, -0.5, half)
    assert float(s.gamma) == 0.5 and float(s.gamma_rescaled) == 0.25 and float(s.z_bar) == 0.25
    s = sample_gates(one, 1.0, -1.0, half)
    assert float(s.gamma_rescaled) == 0.0 and float(s.z_bar) == 0.0
    assert float(deterministic_gates(one, 0.3, -0.5).z_bar) == 0.25
    assert float(deterministic_gates(torch.tensor([1e-30], dtype=D64), 0.5, -0.5).z_bar) == 0.0


def test_gate_argument_errors():
    one = torch.ones(1, dtype=D64)
    with pytest.raises(ValueError):
        sample_gates(one, 1.0, -0.5, torch.zeros(1, dtype=D64))
    with pytest.raises(ValueError):
        sample_gates(one, 1.0, -0.5, torch.ones(1, dtype=D64))
    with pytest.raises(ValueError):
        deterministic_gates(one, 0.0, -0.5)
    with pytest.raises(ValueError):
        deterministic_gates(one, 1.0, 0.0)


def test_draw_uniform_open_interval():
    x = draw_uniform((10_000,), torch.Generator().manual_seed(0), D64)
    assert bool(((x > 0) & (x < 1)).all())


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1e6), st.floats(0.05, 5.0), st.floats(-5.0, -1e-3), st.floats(1e-9, 1 - 1e-9))
def test_gate_range_and_rescale(beta, tau, eta, xi):
    s = sample_gates(torch.tensor([beta], dtype=D64), tau, eta, torch.tensor([xi], dtype=D64))
    # the open upper end only survives while the sigmoid has not rounded to 1.0
    upper_ok = float(s.z_bar) < 1 if float(s.gamma) < 1 else float(s.z_bar) == 1
    assert 0 <= float(s.z_bar) and upper_ok
    assert eta <= float(s.gamma_rescaled) <= 1
    assert math.isclose(float(s.gamma_rescaled), (1 - eta) * float(s.gamma) + eta, abs_tol=1e-12)
    assert float(s.z_bar) == max(float(s.gamma_rescaled), 0.0)


def test_deterministic_gate_is_median_of_sampled():
    gen = torch.Generator().manual_seed(0)
    for beta in (0.5, 1.0, 3.0):
        for tau, eta in ((0.5, -0.5), (1.0, -0.1)):
            b = torch.full((100_000,), beta, dtype=D64)
            z = sample_gates(b, tau, eta, draw_uniform(b.shape, gen)).z_bar
            det = float(deterministic_gates(torch.tensor([beta], dtype=D64), tau, eta).z_bar)
            assert abs(float(z.median()) - det) < 1e-2


def test_gate_open_probability_numpy_and_torch_agree():
    b = np.array([0.5, 1.0, 2.0])
    t = gate_open_probability(torch.tensor(b), 0.5, -0.5).numpy()
    assert np.allclose(gate_open_probability(b, 0.5, -0.5), t, rtol=1e-15)
    assert float(gate_open_probability(torch.tensor(1.0, dtype=D64), 1.0, -1.0)) == 0.5


def test_sampled_gate_gradient_wrt_beta():
    xi = torch.tensor([0.3, 0.6, 0.9], dtype=D64)
    beta = torch.tensor([1.5, 0.8, 2.0], dtype=D64, requires_grad=True)

    def f(b):
        return sample_gates(b, 0.7, -0.5, xi).z_bar

    z = f(beta)
    assert bool((z > 0).all())
    g = torch.autograd.grad(z.sum(), beta)[0]
    with torch.no_grad():
        for j in range(3):
            e = torch.zeros(3, dtype=D64)
            e[j] = 1e-5
            fd = (f(beta + e).sum() - f(beta - e).sum()) / 2e-5
            assert abs(float(fd) - float(g[j])) <= 1e-4 * abs(float(g[j]))


def test_referencing_embedding_cases():
    rows = torch.randn(3, 4, dtype=D64)
    z = torch.zeros(2, 3, dtype=D64)
    t = referencing_embedding(rows, z, torch.tensor([-1, 1]))
    assert torch.allclose(t[0], rows.mean(0), atol=1e-15)
    assert torch.equal(t[1], rows[1])
    two = torch.randn(2, 4, dtype=D64)
    t = referencing_embedding(two, torch.tensor([math.log(3), 0.0], dtype=D64))
    assert torch.allclose(t, 0.75 * two[0] + 0.25 * two[1], atol=1e-15)


def test_masked_referencing():
    rows = torch.randn(3, 4, dtype=D64)
    z = torch.tensor([[0.0, 0.2, 0.0], [0.0, 0.0, 0.0]], dtype=D64)
    t = referencing_embedding(rows, z, masked=True)
    assert torch.allclose(t[0], rows[1], atol=1e-15)
    assert torch.equal(t[1], torch.zeros(4, dtype=D64))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10_000))
def test_referencing_weights_sum_to_one(s, seed):
    gen = torch.Generator().manual_seed(seed)
    z = torch.rand(5, s, generator=gen, dtype=D64)
    w = torch.softmax(z, -1)
    assert torch.allclose(w.sum(-1), torch.ones(5, dtype=D64), atol=1e-9)
    ones = torch.ones(s, 2, dtype=D64)
    assert torch.allclose(referencing_embedding(ones, z), torch.ones(5, 2, dtype=D64), atol=1e-12)


def test_gated_aggregate_cases():
    gen = torch.Generator().manual_seed(0)
    wc, bc, q = torch.randn(2, 4, generator=gen, dtype=D64), torch.randn(2, generator=gen, dtype=D64), \
        torch.randn(2, generator=gen, dtype=D64)
    v = torch.randn(4, generator=gen, dtype=D64)
    assert torch.allclose(gated_aggregate(wc, bc, q, v, v.clone()), v, atol=1e-15)
    t = torch.randn(4, generator=gen, dtype=D64)
    assert torch.allclose(gated_aggregate(wc, bc, torch.zeros(2, dtype=D64), v, t), 0.5 * (v + t), atol=1e-15)
    # c1 - c2 = ln 9 through a single gate unit that saturates on v and vanishes on t
    wc1 = torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=D64) * 60
    q1 = torch.tensor([math.log(9)], dtype=D64)
    v1 = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=D64)
    t1 = torch.tensor([-1.0, 2.0, 0.0, 0.0], dtype=D64)
    out = gated_aggregate(wc1, torch.zeros(1, dtype=D64), q1, v1, t1)
    assert torch.allclose(out, 0.9 * v1 + 0.1 * t1, atol=1e-12)
