"""Masked multihead attention and induced set attention blocks.

All blocks act on batched node sets ``x`` of shape ``(B, n, d)`` together
with a boolean ``mask`` of shape ``(B, n)``. Padded rows never influence
valid rows and are returned as zeros.
"""
from __future__ import annotations

import math

import torch
from torch import nn

__all__ = ["MultiheadAttention", "ISAB", "ISABStack"]


def _full_mask(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
    return mask.to(torch.bool)


class MultiheadAttention(nn.Module):
    """Set Transformer attention block ``MAB(Q, K)``.

    ``H = LN(q(Q) + Attn(Q, K))`` followed by ``LN(H + FF(H))``. Softmax
    weights over masked keys are exactly zero; when every key is masked the
    attention term vanishes and the block reduces to its residual path.
    """

    def __init__(self, dim_q: int, dim_k: int, dim: int, num_heads: int = 4,
                 layer_norm: bool = True):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"width {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.fc_q = nn.Linear(dim_q, dim)
        self.fc_k = nn.Linear(dim_k, dim)
        self.fc_v = nn.Linear(dim_k, dim)
        self.fc_o = nn.Linear(dim, dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.ln0 = nn.LayerNorm(dim) if layer_norm else nn.Identity()
        self.ln1 = nn.LayerNorm(dim) if layer_norm else nn.Identity()

    def forward(self, queries: torch.Tensor, keys: torch.Tensor,
                key_mask: torch.Tensor | None = None,
                query_mask: torch.Tensor | None = None) -> torch.Tensor:
        if queries.shape[-1] != self.fc_q.in_features or keys.shape[-1] != self.fc_k.in_features:
            raise ValueError(
                f"width mismatch: got queries {queries.shape[-1]}, keys {keys.shape[-1]}, "
                f"expected {self.fc_q.in_features}, {self.fc_k.in_features}"
            )
        key_mask = _full_mask(keys, key_mask)
        b, nq, _ = queries.shape
        nk = keys.shape[1]
        h, dh = self.num_heads, self.dim // self.num_heads

        q = self.fc_q(queries)
        k = self.fc_k(keys).view(b, nk, h, dh).transpose(1, 2)
        v = self.fc_v(keys).view(b, nk, h, dh).transpose(1, 2)
        qh = q.view(b, nq, h, dh).transpose(1, 2)

        logits = qh @ k.transpose(-1, -2) / math.sqrt(dh)
        km = key_mask[:, None, None, :]
        logits = logits.masked_fill(~km, torch.finfo(logits.dtype).min)
        weights = torch.softmax(logits, dim=-1) * km
        attn = (weights @ v).transpose(1, 2).reshape(b, nq, self.dim)
        # no valid key: drop the attention term entirely, bias included
        has_key = key_mask.any(dim=-1).to(q.dtype)[:, None, None]

        out = self.ln0(q + self.fc_o(attn) * has_key)
        out = self.ln1(out + self.ff(out))
        if query_mask is not None:
            out = out * query_mask[..., None].to(out.dtype)
        return out


class ISAB(nn.Module):
    """Induced set attention: ``MAB(X, MAB(I, X))`` with ``m`` learned points."""

    def __init__(self, dim_in: int, dim: int, num_heads: int = 4, num_inducing: int = 32,
                 layer_norm: bool = True):
        super().__init__()
        self.inducing = nn.Parameter(torch.randn(num_inducing, dim) / math.sqrt(dim))
        self.mab0 = MultiheadAttention(dim, dim_in, dim, num_heads, layer_norm)
        self.mab1 = MultiheadAttention(dim_in, dim, dim, num_heads, layer_norm)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        mask = _full_mask(x, mask)
        inducing = self.inducing.to(x.dtype).expand(x.shape[0], -1, -1)
        summary = self.mab0(inducing, x, key_mask=mask)
        return self.mab1(x, summary, query_mask=mask)


class ISABStack(nn.Module):
    """Input projection, ``depth`` residual ISAB layers, output projection.

    Parameters
    ----------
    dim_in, dim_out : int
        Input and output feature widths.
    dim : int
        Model width ``d``; must be divisible by ``num_heads``.
    depth : int
        Number of ISAB layers, at least 1.
    """

    def __init__(self, dim_in: int, dim_out: int, dim: int = 64, num_heads: int = 4,
                 num_inducing: int = 32, depth: int = 2, layer_norm: bool = True):
        super().__init__()
        if depth < 1:
            raise ValueError(f"depth must be at least 1, got {depth}")
        self.input = nn.Linear(dim_in, dim)
        self.layers = nn.ModuleList(
            ISAB(dim, dim, num_heads, num_inducing, layer_norm) for _ in range(depth)
        )
        self.output = nn.Linear(dim, dim_out)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        mask = _full_mask(x, mask)
        m = mask[..., None].to(x.dtype)
        h = self.input(x) * m
        for layer in self.layers:
            h = h + layer(h, mask)
        return self.output(h) * m

