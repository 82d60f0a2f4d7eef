"""Query-token bridge between fused visual tokens and the answer decoder.

A fixed set of learned query tokens is refined by L pre-norm residual blocks:
self-attention over the queries with instruction-token embeddings appended as
extra keys/values (instruction tokens are never updated), cross-attention
whose keys/values are the fused visual tokens, and a two-layer feed-forward.
The final query states pass through a LayerNorm and a d_q -> d_dec projection.

No positional terms are added to visual tokens here, so bridge outputs are
invariant to fused-token row permutation; spatial information enters upstream
through the patch position embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class QFormerConfig:
    n_queries: int = 8
    dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    dim_out: int = 32
    dim_visual: int = 32
    ffn_hidden: int = 64

    def __post_init__(self) -> None:
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        for name in ("n_queries", "n_layers", "n_heads", "dim_out", "dim_visual", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def attention_core(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    n_heads: int,
    causal: bool = False,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention on already-projected inputs.

    queries: (N, d); keys/values: (M, d); returns (N, d) with heads
    concatenated. `causal` masks key j > query i (requires N == M).
    """
    n, d = queries.shape
    m = keys.shape[0]
    if keys.shape != values.shape:
        raise ValueError("keys and values must have identical shapes")
    if keys.shape[1] != d:
        raise ValueError(f"key dim {keys.shape[1]} != query dim {d}")
    if d % n_heads != 0:
        raise ValueError(f"dim {d} not divisible by {n_heads} heads")
    d_head = d // n_heads
    q = queries.reshape(n, n_heads, d_head).transpose(0, 1)
    k = keys.reshape(m, n_heads, d_head).transpose(0, 1)
    v = values.reshape(m, n_heads, d_head).transpose(0, 1)
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_head)
    if causal:
        if n != m:
            raise ValueError("causal attention requires equal query/key counts")
        mask = torch.triu(torch.ones(n, m, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return out.transpose(0, 1).reshape(n, d)


class MultiHeadAttention(nn.Module):
    """Explicit q/k/v/out projections around attention_core. Key/value inputs
    may live in a different dimension than queries (cross-attention)."""

    def __init__(self, dim: int, dim_kv: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim_kv, dim)
        self.v_proj = nn.Linear(dim_kv, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self, queries: torch.Tensor, keys_values: torch.Tensor, causal: bool = False
    ) -> torch.Tensor:
        q = self.q_proj(queries)
        k = self.k_proj(keys_values)
        v = self.v_proj(keys_values)
        return self.out_proj(attention_core(q, k, v, self.n_heads, causal=causal))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class QFormerLayer(nn.Module):
    def __init__(self, cfg: QFormerConfig):
        super().__init__()
        self.norm_self = nn.LayerNorm(cfg.dim)
        self.self_attn = MultiHeadAttention(cfg.dim, cfg.dim, cfg.n_heads)
        self.norm_cross = nn.LayerNorm(cfg.dim)
        self.cross_attn = MultiHeadAttention(cfg.dim, cfg.dim_visual, cfg.n_heads)
        self.norm_ffn = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_hidden)

    def forward(
        self, queries: torch.Tensor, instruction: torch.Tensor, visual: torch.Tensor
    ) -> torch.Tensor:
        normed = self.norm_self(torch.cat([queries, instruction], dim=0))
        n_q = queries.shape[0]
        queries = queries + self.self_attn(normed[:n_q], normed)
        queries = queries + self.cross_attn(self.norm_cross(queries), visual)
        queries = queries + self.ffn(self.norm_ffn(queries))
        return queries


class QFormer(nn.Module):
    """Learned query tokens -> L bridge layers -> LayerNorm -> d_q->d_dec."""

    def __init__(self, cfg: QFormerConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.query_embeddings = nn.Parameter(torch.randn(cfg.n_queries, cfg.dim) * 0.02)
        self.instruction_embedding = nn.Embedding(vocab_size, cfg.dim)
        self.layers = nn.ModuleList(QFormerLayer(cfg) for _ in range(cfg.n_layers))
        self.norm_final = nn.LayerNorm(cfg.dim)
        self.out_proj = nn.Linear(cfg.dim, cfg.dim_out)

    def embed_instruction(self, token_ids: list[int]) -> torch.Tensor:
        if not token_ids:
            dtype = self.instruction_embedding.weight.dtype
            return torch.zeros(0, self.cfg.dim, dtype=dtype)
        return self.instruction_embedding(torch.tensor(token_ids, dtype=torch.long))

    def forward(self, fused_tokens: torch.Tensor, instruction: torch.Tensor) -> torch.Tensor:
        if fused_tokens.shape[1] != self.cfg.dim_visual:
            raise ValueError(
                f"fused tokens have dim {fused_tokens.shape[1]}, expected {self.cfg.dim_visual}"
            )
        if instruction.shape[0] and instruction.shape[1] != self.cfg.dim:
            raise ValueError(
                f"instruction tokens have dim {instruction.shape[1]}, expected {self.cfg.dim}"
            )
        if not torch.isfinite(fused_tokens).all():
            raise ValueError("non-finite fused tokens")
        x = self.query_embeddings
        for layer in self.layers:
            x = layer(x, instruction, fused_tokens)
        return self.out_proj(self.norm_final(x))
