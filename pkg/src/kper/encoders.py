"""Interactive encoding, attentive knowledge encoding and 2d fusion."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

PARAM_NAMES = (
    "user_table", "entity_table", "relation_table",
    "attn_w1", "attn_b1", "attn_w2", "attn_b2",
    "seed_table", "probe_weight", "probe_bias",
    "gate_weight", "gate_bias", "gate_query",
)


@dataclass
class ModelParameters:
    """Every trainable tensor of the model.

    Shapes: user/entity/relation tables ``(n, d)``; attention MLP
    ``attn_w1 (d_h, 2d)``, ``attn_b1 (d_h,)``, ``attn_w2 (1, d_h)``,
    ``attn_b2 (1,)``; ``seed_table`` and ``probe_weight`` ``(|S|, 2d)``,
    ``probe_bias (|S|,)``; ``gate_weight (d, 2d)``, ``gate_bias`` and
    ``gate_query`` ``(d,)``.
    """

    user_table: torch.Tensor
    entity_table: torch.Tensor
    relation_table: torch.Tensor
    attn_w1: torch.Tensor
    attn_b1: torch.Tensor
    attn_w2: torch.Tensor
    attn_b2: torch.Tensor
    seed_table: torch.Tensor
    probe_weight: torch.Tensor
    probe_bias: torch.Tensor
    gate_weight: torch.Tensor
    gate_bias: torch.Tensor
    gate_query: torch.Tensor

    def __post_init__(self):
        self.check()

    @property
    def d(self) -> int:
        return self.entity_table.shape[1]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_tensors(cls, tensors: dict[str, torch.Tensor]) -> ModelParameters:
        return cls(**{name: tensors[name] for name in PARAM_NAMES})

    def requires_grad_(self, flag: bool = True) -> ModelParameters:
        for t in self.tensors().values():
            t.requires_grad_(flag)
        return self

    def detached_copy(self) -> ModelParameters:
        return ModelParameters.from_tensors({k: v.detach().clone() for k, v in self.tensors().items()})

    def l2(self) -> torch.Tensor:
        return sum((t * t).sum() for t in self.tensors().values())

    def check(self) -> None:
        d = self.entity_table.shape[1]
        dh = self.attn_w1.shape[0]
        s = self.seed_table.shape[0]
        expected = {
            "user_table": (None, d), "entity_table": (None, d), "relation_table": (None, d),
            "attn_w1": (dh, 2 * d), "attn_b1": (dh,), "attn_w2": (1, dh), "attn_b2": (1,),
            "seed_table": (s, 2 * d), "probe_weight": (s, 2 * d), "probe_bias": (s,),
            "gate_weight": (d, 2 * d), "gate_bias": (d,), "gate_query": (d,),
        }
        for name, shape in expected.items():
            got = tuple(getattr(self, name).shape)
            if len(got) != len(shape) or any(e is not None and e != g for e, g in zip(shape, got)):
                raise ValueError(f"{name} has shape {got}, expected {shape}")


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    """Softmax with max-subtraction; fully masked rows give all-zero weights."""
    if mask is None:
        return torch.softmax(logits, dim=dim)
    neg = torch.finfo(logits.dtype).min
    masked = logits.masked_fill(~mask, neg)
    shift = masked.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(masked - shift) * mask
    z = e.sum(dim=dim, keepdim=True)
    return e / torch.where(z > 0, z, torch.ones_like(z))


def encode_interactive(target: torch.Tensor, neighbors: torch.Tensor,
                       mask: torch.Tensor | None = None) -> torch.Tensor:
    """Target-keyed attention over interaction counterparts.

    ``target`` is ``(..., d)``, ``neighbors`` ``(..., l, d)``; weights are a
    softmax over ``l`` of the dot products with the target. Positions where
    ``mask`` is False are ignored; no valid position gives a zero vector.
    """
    logits = torch.einsum("...ld,...d->...l", neighbors, target)
    alpha = masked_softmax(logits, mask)
    return torch.einsum("...l,...ld->...d", alpha, neighbors)


def triple_attention_logits(params: ModelParameters, heads: torch.Tensor, rels: torch.Tensor) -> torch.Tensor:
    x = torch.cat([heads, rels], dim=-1)
    hidden = torch.relu(x @ params.attn_w1.T + params.attn_b1)
    return (hidden @ params.attn_w2.T + params.attn_b2).squeeze(-1)


def encode_hop(params: ModelParameters, heads: torch.Tensor, rels: torch.Tensor, tails: torch.Tensor,
               valid: torch.Tensor | None = None, attentive: bool = True) -> torch.Tensor:
    """Attention-weighted sum of tail embeddings over one hop's sampled triples.

    Inputs are ``(..., l, d)``; ``valid`` (shape ``(...)``) marks hops with a
    non-empty pool, the rest encode to zero. ``attentive=False`` weights all
    triples equally.
    """
    if attentive:
        logits = triple_attention_logits(params, heads, rels)
    else:
        logits = torch.zeros(tails.shape[:-1], dtype=tails.dtype)
    mask = None
    if valid is not None:
        mask = valid.unsqueeze(-1).expand(logits.shape)
    pi = masked_softmax(logits, mask)
    return torch.einsum("...l,...ld->...d", pi, tails)


def fuse(v_o: torch.Tensor, v_hops: torch.Tensor) -> torch.Tensor:
    """``v_o`` concatenated with the mean over hops (zeros when there are none)."""
    if v_hops.shape[-2] == 0:
        return torch.cat([v_o, torch.zeros_like(v_o)], dim=-1)
    return torch.cat([v_o, v_hops.mean(dim=-2)], dim=-1)
