import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kper.encoders import (
    ModelParameters, encode_hop, encode_interactive, fuse, masked_softmax, triple_attention_logits,
)
from kper.training import TrainConfig, init_parameters

torch.set_default_dtype(torch.float64)


def params(d=4, seed=0, n_ent=6, n_rel=3):
    return init_parameters(TrainConfig(d=d, dtype="float64"), 3, n_ent, n_rel, 4, seed)


def test_uniform_neighbors_give_shared_embedding():
    v = torch.tensor([0.3, -1.0, 2.0])
    out = encode_interactive(torch.tensor([1.0, 2.0, 3.0]), v.expand(5, 3))
    assert torch.allclose(out, v, atol=1e-15)


def test_two_neighbor_hand_softmax():
    target = torch.tensor([1.0, 0.0])
    v1, v2 = torch.tensor([0.0, 1.0]), torch.tensor([math.log(3), 5.0])
    out = encode_interactive(target, torch.stack([v1, v2]))
    assert torch.allclose(out, 0.25 * v1 + 0.75 * v2, atol=1e-15)


def test_empty_neighbors_zero_vector():
    out = encode_interactive(torch.ones(3), torch.ones(4, 3), torch.zeros(4, dtype=torch.bool))
    assert torch.equal(out, torch.zeros(3))


def test_masked_softmax_ignores_masked_entries():
    w = masked_softmax(torch.tensor([1.0, 100.0, 2.0]), torch.tensor([True, False, True]))
    assert w[1] == 0 and torch.allclose(w[[0, 2]], torch.softmax(torch.tensor([1.0, 2.0]), 0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_weights_and_order_invariance(l, d, seed):
    gen = torch.Generator().manual_seed(seed)
    target = torch.randn(d, generator=gen)
    nbrs = torch.randn(l, d, generator=gen)
    logits = nbrs @ target
    w = masked_softmax(logits)
    assert abs(float(w.sum()) - 1) < 1e-9 and bool(((w > 0) & (w <= 1)).all())
    perm = torch.randperm(l, generator=gen)
    assert torch.allclose(encode_interactive(target, nbrs), encode_interactive(target, nbrs[perm]), atol=1e-12)
    p = params(d, seed % 1000)
    heads, rels, tails = (torch.randn(l, d, generator=gen) for _ in range(3))
    a = encode_hop(p, heads, rels, tails)
    b = encode_hop(p, heads[perm], rels[perm], tails[perm])
    assert torch.allclose(a, b, atol=1e-12)


def test_hop_equal_scores_is_mean_of_tails():
    p = params()
    p.attn_w2.zero_()
    tails = torch.randn(5, 4)
    assert torch.allclose(encode_hop(p, torch.randn(5, 4), torch.randn(5, 4), tails), tails.mean(0), atol=1e-14)


def test_hop_single_triple_returns_tail():
    p = params()
    t = torch.randn(1, 4)
    assert torch.equal(encode_hop(p, torch.randn(1, 4), torch.randn(1, 4), t), t[0])


def test_hop_invalid_gives_zero():
    p = params()
    out = encode_hop(p, torch.randn(2, 3, 4), torch.randn(2, 3, 4), torch.randn(2, 3, 4), torch.tensor([True, False]))
    assert torch.equal(out[1], torch.zeros(4)) and out[0].abs().sum() > 0


def test_hop_matches_scalar_recomputation():
    p = params(d=3, seed=5)
    gen = torch.Generator().manual_seed(1)
    heads, rels, tails = (torch.randn(3, 3, generator=gen) for _ in range(3))
    w1, b1, w2, b2 = (x.tolist() for x in (p.attn_w1, p.attn_b1, p.attn_w2, p.attn_b2))
    scores = []
    for j in range(3):
        x = heads[j].tolist() + rels[j].tolist()
        hidden = [max(0.0, sum(w1[a][c] * x[c] for c in range(6)) + b1[a]) for a in range(len(b1))]
        scores.append(sum(w2[0][a] * hidden[a] for a in range(len(hidden))) + b2[0])
    z = [math.exp(s - max(scores)) for s in scores]
    pi = [v / sum(z) for v in z]
    expected = [sum(pi[j] * float(tails[j, c]) for j in range(3)) for c in range(3)]
    assert np.allclose(encode_hop(p, heads, rels, tails).tolist(), expected, atol=1e-14)
    assert np.allclose(triple_attention_logits(p, heads, rels).tolist(), scores, atol=1e-14)


def test_fuse_cases():
    v_o = torch.arange(4.0)
    one = torch.randn(1, 4)
    assert torch.equal(fuse(v_o, one)[4:], one[0])
    two = torch.zeros(2, 4)
    two[0, 0], two[1, 1] = 1, 1
    assert torch.equal(fuse(v_o, two)[4:], torch.tensor([0.5, 0.5, 0.0, 0.0]))
    none = fuse(v_o, torch.zeros(0, 4))
    assert none.shape == (8,) and torch.equal(none[4:], torch.zeros(4))


def test_parameter_shape_check():
    p = params()
    t = p.tensors()
    t["gate_query"] = torch.zeros(5)
    with pytest.raises(ValueError, match="gate_query"):
        ModelParameters.from_tensors(t)


def test_encoder_gradients_match_finite_differences():
    p = params(d=3, seed=2)
    gen = torch.Generator().manual_seed(0)
    target = torch.randn(3, generator=gen, requires_grad=True)
    nbrs = torch.randn(4, 3, generator=gen, requires_grad=True)
    heads, rels, tails = (torch.randn(4, 3, generator=gen) for _ in range(3))
    weights = [p.attn_w1, p.attn_b1, p.attn_w2]
    for w in weights:
        w.requires_grad_(True)

    def f():
        return encode_interactive(target, nbrs).sum() + (encode_hop(p, heads, rels, tails) ** 2).sum()

    inputs = [target, nbrs] + weights
    grads = torch.autograd.grad(f(), inputs)
    with torch.no_grad():
        for x, gx in zip(inputs, grads):
            fd = torch.zeros_like(x)
            for j in range(x.numel()):
                orig = float(x.view(-1)[j])
                x.view(-1)[j] = orig + 1e-5
                up = float(f())
                x.view(-1)[j] = orig - 1e-5
                down = float(f())
                x.view(-1)[j] = orig
                fd.view(-1)[j] = (up - down) / 2e-5
            assert float((fd - gx).norm()) <= 1e-4 * max(float(gx.norm()), 1e-8)
