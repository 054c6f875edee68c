"""Scaled dot-product attention heads and multi-head attention.

Every head projects its inputs with full-width ``d_att x d_att`` matrices, so
the concatenated head outputs are ``h * d_att`` wide before the combine matrix
``u_h`` maps them back to ``d_att``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (DimensionError, Tensor, dropout, matmul, reshape, scale,
                     softmax_rows, transpose)


@dataclass
class AttentionRecord:
    layer_index: int
    head_index: int
    matrix: np.ndarray  # (..., n, m), rows sum to one


@dataclass
class MhaWeights:
    wq: Tensor  # (h, d_att, d_att); wq.data[i] is head i
    wk: Tensor
    wv: Tensor
    u_h: Tensor  # (h * d_att, d_att)

    def __post_init__(self):
        h, d, d2 = self.wq.shape
        if d != d2:
            raise DimensionError(f"head projections must be square, got {self.wq.shape}")
        for name in ("wk", "wv"):
            if getattr(self, name).shape != (h, d, d):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, "
                                     f"expected {(h, d, d)}")
        if self.u_h.shape != (h * d, d):
            raise DimensionError(f"u_h has shape {self.u_h.shape}, expected {(h * d, d)}")

    @property
    def h(self) -> int:
        return self.wq.shape[0]

    @property
    def d_att(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def init(cls, h: int, d: int, rng: np.random.Generator) -> "MhaWeights":
        std = 1.0 / math.sqrt(d)
        return cls(*(Tensor(rng.normal(0.0, std, (h, d, d)), requires_grad=True)
                     for _ in range(3)),
                   u_h=Tensor(rng.normal(0.0, 1.0 / math.sqrt(h * d), (h * d, d)),
                              requires_grad=True))


def identity_mha_weights(h: int, d: int) -> MhaWeights:
    """Weights under which an identity attention matrix makes MHA(X, X, X) == X.

    Values are the identity for every head and the combine matrix averages the
    ``h`` identical head outputs. Query/key projections are fixed but arbitrary.
    """
    if h < 1:
        raise ValueError("need at least one head")
    rng = np.random.default_rng(1234)
    eye = np.broadcast_to(np.eye(d), (h, d, d)).copy()
    return MhaWeights(wq=Tensor(rng.normal(size=(h, d, d))),
                      wk=Tensor(rng.normal(size=(h, d, d))),
                      wv=Tensor(eye),
                      u_h=Tensor(np.vstack([np.eye(d)] * h) / h))


def _check_inputs(xq: Tensor, xk: Tensor, xv: Tensor, d: int) -> None:
    if xq.shape[-1] != d or xk.shape[-1] != d or xv.shape[-1] != d:
        raise DimensionError(f"attention inputs {xq.shape}, {xk.shape}, {xv.shape} "
                             f"do not match d_att={d}")
    if xk.shape[-2] != xv.shape[-2]:
        raise DimensionError(f"keys {xk.shape} and values {xv.shape} differ in length")


def attention_head(xq: Tensor, xk: Tensor, xv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                   mask: np.ndarray | None = None,
                   attn_override: np.ndarray | None = None) -> tuple[Tensor, AttentionRecord]:
    """softmax(Q K^T / sqrt(d)) V for one head with Q, K, V = xq wq, xk wk, xv wv."""
    d = wq.shape[-1]
    _check_inputs(xq, xk, xv, d)
    q, k, v = matmul(xq, wq), matmul(xk, wk), matmul(xv, wv)
    if attn_override is not None:
        probs = Tensor(attn_override)
    else:
        probs = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)), mask)
    return matmul(probs, v), AttentionRecord(-1, 0, probs.data)


def multi_head_attention(xq: Tensor, xk: Tensor, xv: Tensor, w: MhaWeights,
                         mask: np.ndarray | None = None, *,
                         attn_override: np.ndarray | None = None,
                         dropout_rate: float = 0.0,
                         rng: np.random.Generator | None = None,
                         layer_index: int = -1) -> tuple[Tensor, list[AttentionRecord]]:
    """Concatenate ``h`` attention heads along features and combine with ``u_h``.

    Inputs may carry leading batch axes: ``xq`` is (..., n, d), ``xk``/``xv`` are
    (..., m, d) and ``mask`` broadcasts to (..., n, m). ``attn_override`` replaces
    the softmax output of every head with a fixed row-stochastic matrix; it
    exists for testing the diagonal-attention view of feed-forward layers.
    Dropout on the attention probabilities is applied only when ``rng`` is given.
    """
    h, d = w.h, w.d_att
    _check_inputs(xq, xk, xv, d)
    lead = xq.shape[:-2]
    n, m = xq.shape[-2], xk.shape[-2]

    def heads(x: Tensor, proj: Tensor) -> Tensor:
        # (..., 1, len, d) @ (h, d, d) -> (..., h, len, d)
        return matmul(reshape(x, x.shape[:-2] + (1,) + x.shape[-2:]), proj)

    q, k, v = heads(xq, w.wq), heads(xk, w.wk), heads(xv, w.wv)
    if attn_override is not None:
        probs = Tensor(np.broadcast_to(attn_override, lead + (h, n, m)))
    else:
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
        head_mask = None if mask is None else np.expand_dims(mask, -3)
        probs = softmax_rows(scores, head_mask)
    records = [AttentionRecord(layer_index, i, probs.data[..., i, :, :]) for i in range(h)]
    ctx = matmul(dropout(probs, dropout_rate, rng), v)  # (..., h, n, d)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = reshape(transpose(ctx, axes), lead + (n, h * d))
    return matmul(ctx, w.u_h), records
