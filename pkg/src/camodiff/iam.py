"""Injection attention: fuses conditioning features into bottleneck tokens.

Both inputs are stride-32 feature maps with the same token width d. The
denoiser feature D supplies query, key, and value streams; the conditioning
feature F supplies a projection stream P and a second value stream. Two
row-stochastic maps are formed,

    M1 = softmax(Q P^T / sqrt(d)),   M2 = softmax(K P^T / sqrt(d)),

and the output tokens are O = M1 M2 (V_D + V_F). Single head, five bias-free
d x d matrices, nothing else. M1 M2 is itself row-stochastic (product of
row-stochastic matrices), so O stays in the convex hull of the summed values.
"""

import math

import torch
import torch.nn as nn

from .errors import ShapeError


def map_to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C) token matrix."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(1, 2)


def tokens_to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(B, N, C) -> (B, C, H, W); N must equal h*w."""
    b, n, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"cannot fold {n} tokens into a {h}x{w} map")
    return tokens.transpose(1, 2).reshape(b, c, h, w)


class InjectionAttention(nn.Module):
    """Single-head cross-attention with an extra projection stream from F."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.w_q = nn.Parameter(torch.empty(dim, dim))
        self.w_k = nn.Parameter(torch.empty(dim, dim))
        self.w_v = nn.Parameter(torch.empty(dim, dim))
        self.w_p = nn.Parameter(torch.empty(dim, dim))
        self.w_vf = nn.Parameter(torch.empty(dim, dim))
        for w in (self.w_q, self.w_k, self.w_v, self.w_p, self.w_vf):
            nn.init.xavier_uniform_(w)

    def attention_maps(self, d_tokens: torch.Tensor, f_tokens: torch.Tensor):
        """The two row-stochastic maps (M1, M2), each (B, N, N)."""
        self._check(d_tokens, f_tokens)
        scale = 1.0 / math.sqrt(self.dim)
        q = d_tokens @ self.w_q
        k = d_tokens @ self.w_k
        p = f_tokens @ self.w_p
        m1 = torch.softmax(q @ p.transpose(1, 2) * scale, dim=-1)
        m2 = torch.softmax(k @ p.transpose(1, 2) * scale, dim=-1)
        return m1, m2

    def forward_tokens(self, d_tokens: torch.Tensor, f_tokens: torch.Tensor,
                       m2_transposed: bool = False) -> torch.Tensor:
        """Token-level forward; ``m2_transposed`` is a comparison-only variant."""
        m1, m2 = self.attention_maps(d_tokens, f_tokens)
        if m2_transposed:
            m2 = m2.transpose(1, 2)
        values = d_tokens @ self.w_v + f_tokens @ self.w_vf
        return m1 @ (m2 @ values)

    def forward(self, d_map: torch.Tensor, f_map: torch.Tensor,
                m2_transposed: bool = False) -> torch.Tensor:
        """Map-level forward: (B, d, h, w) x (B, d, h, w) -> (B, d, h, w)."""
        if d_map.shape != f_map.shape:
            raise ShapeError(
                f"D and F must share shape, got {tuple(d_map.shape)} vs {tuple(f_map.shape)}"
            )
        b, c, h, w = d_map.shape
        out = self.forward_tokens(map_to_tokens(d_map), map_to_tokens(f_map),
                                  m2_transposed=m2_transposed)
        return tokens_to_map(out, h, w)

    def _check(self, d_tokens, f_tokens):
        if d_tokens.ndim != 3 or f_tokens.ndim != 3:
            raise ShapeError("token inputs must be (B, N, d)")
        if d_tokens.shape != f_tokens.shape:
            raise ShapeError(
                f"D and F tokens must share shape, got {tuple(d_tokens.shape)} "
                f"vs {tuple(f_tokens.shape)}"
            )
        if d_tokens.shape[-1] != self.dim:
            raise ShapeError(f"token width {d_tokens.shape[-1]} != module dim {self.dim}")
