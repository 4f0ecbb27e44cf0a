"""One-encoder / one-decoder transformer over per-AU RoI tokens.

No positional embedding is added anywhere: the token order carries no
meaning, so the encoder is permutation-equivariant and the decoder output is
invariant to the order of the encoder tokens.
"""
from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention, softmax over keys.

    Shapes are ``(..., Lq, d)``, ``(..., Lk, d)`` and ``(..., Lk, dv)``; the
    scale is ``sqrt(d)`` with ``d`` the query/key width.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.last_weights: Tensor | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, -1).transpose(1, 2)

    def forward(self, query: Tensor, memory: Tensor) -> Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(memory))
        v = self._split(self.v_proj(memory))
        out, weights = attention(q, k, v, return_weights=True)
        self.last_weights = weights.detach()
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.d_model)
        return self.out_proj(out)


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, hidden: int):
        super().__init__(nn.Linear(d_model, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, d_model))


class EncoderLayer(nn.Module):
    """Post-norm block: self-attention, add & norm, feed-forward, add & norm."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, eps: float = 1e-5):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model, eps=eps)
        self.ffn = FeedForward(d_model, ffn_dim)
        self.norm2 = nn.LayerNorm(d_model, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    """Query self-attention, then cross-attention into the encoder output."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, eps: float = 1e-5):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model, eps=eps)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model, eps=eps)
        self.ffn = FeedForward(d_model, ffn_dim)
        self.norm3 = nn.LayerNorm(d_model, eps=eps)

    def forward(self, queries: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(queries + self.self_attn(queries, queries))
        h = self.norm2(h + self.cross_attn(h, memory))
        return self.norm3(h + self.ffn(h))


class RelationTransformer(nn.Module):
    """Shared encoder/decoder applied to the left and right RoI sequences.

    ``queries`` holds one learnable ``d_model`` vector per AU (stored
    row-wise, i.e. the transpose of the d x N query matrix).
    """

    def __init__(self, n_aus: int, d_model: int = 128, n_heads: int = 8, ffn_dim: int = 512):
        super().__init__()
        self.n_aus = n_aus
        self.encoder = EncoderLayer(d_model, n_heads, ffn_dim)
        self.decoder = DecoderLayer(d_model, n_heads, ffn_dim)
        # small init so the learned part dominates the query geometry
        self.queries = nn.Parameter(torch.randn(n_aus, d_model) * 0.02)

    def encode(self, tokens: Tensor) -> Tensor:
        return self.encoder(tokens)

    def decode(self, memory: Tensor) -> Tensor:
        q = self.queries.unsqueeze(0).expand(memory.shape[0], -1, -1)
        return self.decoder(q, memory)

    def sides(self, left: Tensor, right: Tensor) -> tuple[Tensor, Tensor]:
        """Decoded per-AU features for each side, each ``(B, N, d)``."""
        b = left.shape[0]
        out = self.decode(self.encode(torch.cat([left, right], dim=0)))
        return out[:b], out[b:]

    def forward(self, left: Tensor, right: Tensor) -> Tensor:
        dl, dr = self.sides(left, right)
        return (dl + dr) / 2


def relation_forward(transformer: RelationTransformer, left: Tensor, right: Tensor) -> Tensor:
    return transformer(left, right)


def query_similarity(queries: Tensor) -> Tensor:
    """Cosine-similarity matrix between AU queries (rows of ``queries``)."""
    queries = queries.detach()
    norms = queries.norm(dim=1)
    if torch.any(norms == 0):
        raise ValueError("query bank contains a zero-norm query")
    unit = queries / norms[:, None]
    return unit @ unit.T
