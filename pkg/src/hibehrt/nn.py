"""Tensor primitives and Transformer building blocks.

Tensors and reverse-mode differentiation come from torch; the layers are
written out here so masking, dropout placement and initialisation are
explicit. Dropout draws from a ``torch.Generator`` passed down the call
chain rather than from torch's global stream.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import AllMasked, IdOutOfRange, NonFiniteValue, NonScalarLoss, ShapeMismatch

INIT_STD = 0.02
LN_EPS = 1e-12


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteValue(f"non-finite values in {what}")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeMismatch(f"add {tuple(a.shape)} + {tuple(b.shape)}") from None
    return a + b


def scale(a: Tensor, c: float) -> Tensor:
    return a * c


def transpose(a: Tensor) -> Tensor:
    return a.transpose(-1, -2)


def softmax(x: Tensor) -> Tensor:
    return torch.softmax(x, dim=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis (biased variance), then apply gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeMismatch(f"layer_norm gain/bias {tuple(gain.shape)} vs input {tuple(x.shape)}")
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact (erf) Gaussian CDF."""
    return F.gelu(x, approximate="none")


def dropout(x: Tensor, rate: float, rng: torch.Generator | None, train: bool) -> Tensor:
    """Inverted dropout drawing its keep-mask from ``rng``; identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = torch.empty_like(x).bernoulli_(1.0 - rate, generator=rng)
    return x * keep.mul_(1.0 / (1.0 - rate))


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IdOutOfRange(f"ids outside [0, {table.shape[0]})")
    return table[ids]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable parameter."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise NonScalarLoss(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.backward()


def trunc_normal_(t: Tensor, std: float = INIT_STD) -> Tensor:
    return nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(trunc_normal_(torch.empty(d_in, d_out)))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = LN_EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, attn_dropout: float = 0.0):
        super().__init__()
        if d % heads:
            raise ShapeMismatch(f"hidden size {d} not divisible by {heads} heads")
        self.d, self.heads, self.attn_dropout = d, heads, attn_dropout
        self.wq, self.wk, self.wv, self.wo = (Linear(d, d) for _ in range(4))

    def forward(
        self,
        x: Tensor,
        mask: Tensor,
        rng: torch.Generator | None = None,
        return_weights: bool = False,
        query_index: Tensor | None = None,
    ):
        """Self-attention over ``x`` [..., L, d] with key validity ``mask`` [..., L].

        Rows at invalid query positions are computed but meaningless. With
        ``query_index`` [...] only that one query row per sequence is computed
        and the output is [..., 1, d].
        """
        *lead, L, d = x.shape
        if d != self.d or mask.shape != x.shape[:-1]:
            raise ShapeMismatch(f"attention input {tuple(x.shape)}, mask {tuple(mask.shape)}")
        if (~mask).all(-1).any():
            raise AllMasked("attention over a sequence with no valid keys")
        h, dh = self.heads, d // self.heads

        def split(t):
            return t.reshape(*lead, t.shape[-2], h, dh).transpose(-2, -3)

        xq = x if query_index is None else gather_rows(x, query_index)
        q = split(self.wq(xq) * (1.0 / math.sqrt(dh)))
        k, v = split(self.wk(x)), split(self.wv(x))
        bias = torch.zeros(mask.shape, dtype=x.dtype).masked_fill_(~mask, float("-inf"))
        logits = matmul(q, transpose(k)) + bias[..., None, None, :]
        weights = softmax(logits)
        probs = dropout(weights, self.attn_dropout, rng, self.training)
        ctx = matmul(probs, v).transpose(-2, -3).reshape(*lead, xq.shape[-2], d)
        out = self.wo(ctx)
        return (out, weights) if return_weights else out


def gather_rows(x: Tensor, index: Tensor) -> Tensor:
    """x[..., index, :] keeping a length-1 row axis."""
    idx = index[..., None, None].expand(*index.shape, 1, x.shape[-1])
    return torch.gather(x, -2, idx)


class TransformerEncoderLayer(nn.Module):
    """Post-norm encoder layer: attention + residual + norm, then GELU FFN + residual + norm."""

    def __init__(self, d: int, heads: int, intermediate: int, dropout: float, attn_dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads, attn_dropout)
        self.norm1 = LayerNorm(d)
        self.ff_in = Linear(d, intermediate)
        self.ff_out = Linear(intermediate, d)
        self.norm2 = LayerNorm(d)
        self.dropout = dropout

    def forward(
        self,
        x: Tensor,
        mask: Tensor,
        rng: torch.Generator | None = None,
        query_index: Tensor | None = None,
    ) -> Tensor:
        a = dropout(self.attn(x, mask, rng, query_index=query_index), self.dropout, rng, self.training)
        if query_index is not None:
            x = gather_rows(x, query_index)
        x = self.norm1(x + a)
        f = self.ff_out(gelu(self.ff_in(x)))
        f = dropout(f, self.dropout, rng, self.training)
        return self.norm2(x + f)


class TransformerEncoder(nn.Module):
    def __init__(
        self, n_layers: int, d: int, heads: int, intermediate: int, dropout: float, attn_dropout: float
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerEncoderLayer(d, heads, intermediate, dropout, attn_dropout)
            for _ in range(n_layers)
        )

    def forward(
        self,
        x: Tensor,
        mask: Tensor,
        rng: torch.Generator | None = None,
        query_index: Tensor | None = None,
    ) -> Tensor:
        """Run all layers; with ``query_index`` the last layer emits only that row ([..., 1, d])."""
        for i, layer in enumerate(self.layers):
            last = i == len(self.layers) - 1
            x = layer(x, mask, rng, query_index if last else None)
        return x
