"""Autoregressive decoder, label-smoothed cross-entropy, CTC and the joint loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import MhaWeights, multi_head_attention
from .encoder import FfLayerWeights, ff_layer_forward, sinusoidal_pe, _ones, _zeros, _param
from .tensor import (Tensor, dropout, embedding, layer_norm, log_softmax, matmul, mul,
                     record_op, reshape, scale, tsum)

BLANK, SOS, EOS, PAD = "<blank>", "<sos>", "<eos>", "<pad>"


@dataclass(frozen=True)
class TokenVocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        if not self.tokens or self.tokens[0] != BLANK:
            raise ValueError("the CTC blank must sit at index 0")
        for special in (SOS, EOS, PAD):
            if special not in self.tokens:
                raise ValueError(f"vocabulary lacks {special}")

    @classmethod
    def synthetic(cls, n: int) -> "TokenVocab":
        return cls((BLANK, SOS, EOS, PAD) + tuple(f"t{i}" for i in range(n)))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return 0

    @property
    def sos(self) -> int:
        return self.tokens.index(SOS)

    @property
    def eos(self) -> int:
        return self.tokens.index(EOS)

    @property
    def pad(self) -> int:
        return self.tokens.index(PAD)

    @property
    def first_content(self) -> int:
        return 4


@dataclass
class DecoderLayerWeights:
    self_mha: MhaWeights
    self_ln_gamma: Tensor
    self_ln_beta: Tensor
    src_mha: MhaWeights
    src_ln_gamma: Tensor
    src_ln_beta: Tensor
    ff: FfLayerWeights


@dataclass
class DecoderWeights:
    embed: Tensor  # (V, d)
    layers: list[DecoderLayerWeights]
    final_gamma: Tensor
    final_beta: Tensor
    out_w: Tensor  # (d, V)
    out_b: Tensor
    ctc_w: Tensor  # (d, V), applied to the final encoder output
    ctc_b: Tensor

    @classmethod
    def init(cls, vocab_size: int, d: int, d_ff: int, h: int, num_layers: int,
             rng: np.random.Generator) -> "DecoderWeights":
        layers = [DecoderLayerWeights(MhaWeights.init(h, d, rng), _ones(d), _zeros(d),
                                      MhaWeights.init(h, d, rng), _ones(d), _zeros(d),
                                      FfLayerWeights.init(d, d_ff, rng))
                  for _ in range(num_layers)]
        std = 1 / math.sqrt(d)
        return cls(_param(rng, (vocab_size, d), std), layers, _ones(d), _zeros(d),
                   _param(rng, (d, vocab_size), std), _zeros(vocab_size),
                   _param(rng, (d, vocab_size), std), _zeros(vocab_size))

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]


def decoder_forward(enc: Tensor, enc_lengths: np.ndarray | None, prev_tokens, w: DecoderWeights,
                    token_lengths: np.ndarray | None = None, *, norm: str = "pre",
                    dropout_rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Logits (B, L, V) for teacher-forced ``prev_tokens`` (B, L), each starting with sos.

    Row l depends only on ``enc`` and tokens 0..l.
    """
    tokens = np.asarray(prev_tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None]
        enc = reshape(enc, (1,) + enc.shape) if enc.ndim == 2 else enc
    B, L = tokens.shape
    T, d = enc.shape[1], enc.shape[2]
    if enc_lengths is None:
        enc_lengths = np.full(B, T)
    if token_lengths is None:
        token_lengths = np.full(B, L)

    causal = np.tril(np.ones((L, L), dtype=bool))[None]
    self_mask = causal & (np.arange(L)[None, None, :] < np.asarray(token_lengths)[:, None, None])
    src_mask = (np.arange(T)[None, :] < np.asarray(enc_lengths)[:, None])[:, None, :]

    y = embedding(w.embed, tokens) * math.sqrt(d) + Tensor(sinusoidal_pe(L, d))
    y = dropout(y, dropout_rate, rng)
    for lw in w.layers:
        u = layer_norm(y, lw.self_ln_gamma, lw.self_ln_beta) if norm == "pre" else y
        att, _ = multi_head_attention(u, u, u, lw.self_mha, self_mask,
                                      dropout_rate=dropout_rate, rng=rng)
        y = y + dropout(att, dropout_rate, rng)
        if norm == "post":
            y = layer_norm(y, lw.self_ln_gamma, lw.self_ln_beta)
        u = layer_norm(y, lw.src_ln_gamma, lw.src_ln_beta) if norm == "pre" else y
        att, _ = multi_head_attention(u, enc, enc, lw.src_mha, src_mask,
                                      dropout_rate=dropout_rate, rng=rng)
        y = y + dropout(att, dropout_rate, rng)
        if norm == "post":
            y = layer_norm(y, lw.src_ln_gamma, lw.src_ln_beta)
        y = ff_layer_forward(y, lw.ff, norm=norm, dropout_rate=dropout_rate, rng=rng)
    if norm == "pre":
        y = layer_norm(y, w.final_gamma, w.final_beta)
    logits = matmul(y, w.out_w) + w.out_b
    return reshape(logits, logits.shape[1:]) if squeeze else logits


def label_smoothing_ce(logits: Tensor, targets, eps: float = 0.1,
                       valid: np.ndarray | None = None) -> Tensor:
    """Cross-entropy against (1 - eps) * onehot + eps * uniform, averaged over valid positions."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing weight must lie in [0, 1), got {eps}")
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    valid = np.ones(targets.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("every target position is padding")
    q = np.full(logits.shape, eps / V)
    np.put_along_axis(q, np.where(valid, targets, 0)[..., None],
                      1.0 - eps + eps / V, axis=-1)
    q *= valid[..., None]
    return scale(tsum(mul(log_softmax(logits), Tensor(q))), -1.0 / n_valid)


def ctc_feasible(num_frames: int, target: Sequence[int]) -> bool:
    repeats = sum(a == b for a, b in zip(target, target[1:]))
    return num_frames >= len(target) + repeats


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, -np.inf)
    if k > 0 and k < a.shape[1]:
        out[:, k:] = a[:, :-k]
    elif k < 0 and -k < a.shape[1]:
        out[:, :k] = a[:, -k:]
    return out


def ctc_loss_batch(log_probs: Tensor, lengths, targets: Sequence[Sequence[int]],
                   blank: int = 0) -> Tensor:
    """Per-utterance -log P(target | log_probs) for a padded batch (B, T, V).

    The forward (alpha) and backward (beta) recursions run in log space over the
    blank-augmented label sequence. Infeasible alignments yield +inf with zero
    gradient.
    """
    lp = log_probs.data
    B, T, V = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.max() > T or lengths.min() < 1:
        raise ValueError("frame lengths must lie in [1, T]")
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    n_states = np.empty(B, dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1:2 * len(tgt):2] = tgt
        n_states[b] = 2 * len(tgt) + 1
    state_ok = np.arange(S)[None, :] < n_states[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    em = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    em = np.where(state_ok[:, None, :], em, -np.inf)
    skip_from = np.zeros((B, S), dtype=bool)  # state s may jump to s + 2
    skip_from[:, :-2] = skip[:, 2:]

    alpha = np.full((B, T, S), -np.inf)
    alpha[:, 0, :2] = em[:, 0, :2]
    for t in range(1, T):
        a = alpha[:, t - 1]
        a1 = _shift(a, 1)
        a2 = np.where(skip, _shift(a, 2), -np.inf)
        alpha[:, t] = np.logaddexp(np.logaddexp(a, a1), a2) + em[:, t]

    rows = np.arange(B)
    last = alpha[rows, lengths - 1]
    end = np.take_along_axis(last, (n_states - 1)[:, None], axis=1)[:, 0]
    pen = np.where(n_states > 1,
                   np.take_along_axis(last, np.maximum(n_states - 2, 0)[:, None], axis=1)[:, 0],
                   -np.inf)
    log_p = np.logaddexp(end, pen)
    losses = -log_p

    def grad_fn(g):
        beta = np.full((B, S), -np.inf)
        grad = np.zeros_like(lp)
        init = np.full((B, S), -np.inf)
        idx_end = n_states - 1
        init[rows, idx_end] = em[rows, lengths - 1, idx_end]
        has_pen = n_states > 1
        init[rows[has_pen], idx_end[has_pen] - 1] = em[rows[has_pen], lengths[has_pen] - 1,
                                                       idx_end[has_pen] - 1]
        feasible = np.isfinite(log_p)
        with np.errstate(invalid="ignore"):
            for t in range(T - 1, -1, -1):
                b1 = _shift(beta, -1)
                b2 = np.where(skip_from, _shift(beta, -2), -np.inf)
                rec = np.logaddexp(np.logaddexp(beta, b1), b2) + em[:, t]
                beta = np.where((t == lengths - 1)[:, None], init,
                                np.where((t < lengths - 1)[:, None], rec, -np.inf))
                occ = alpha[:, t] + beta - em[:, t] - log_p[:, None]
                occ = np.where(state_ok & feasible[:, None] & (t < lengths)[:, None],
                               np.exp(occ), 0.0)
                np.add.at(grad[:, t], (np.repeat(rows, S), ext.reshape(-1)), -occ.reshape(-1))
        grad *= np.where(feasible, g, 0.0)[:, None, None]
        return (grad,)

    return record_op((log_probs,), losses, grad_fn)


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """CTC loss for one utterance, log_probs (T, V). Returns +inf if no alignment exists."""
    out = ctc_loss_batch(reshape(log_probs, (1,) + log_probs.shape), [log_probs.shape[0]],
                         [list(target)], blank)
    return reshape(out, ())


def joint_loss(ld: Tensor, lctc: Tensor, lam: float) -> Tensor:
    """(1 - lam) * ld + lam * lctc; the endpoints return the single term untouched."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return ld
    if lam == 1.0:
        return lctc
    return scale(ld, 1.0 - lam) + scale(lctc, lam)


def greedy_decode(enc: Tensor, enc_lengths, w: DecoderWeights, vocab: TokenVocab,
                  max_len: int, norm: str = "pre") -> list[list[int]]:
    """Append the argmax token until eos or ``max_len`` tokens; eos is not returned."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if enc.ndim == 2:
        enc = reshape(enc, (1,) + enc.shape)
    B = enc.shape[0]
    tokens = np.full((B, 1), vocab.sos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    hyps: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_len):
        logits = decoder_forward(enc, enc_lengths, tokens, w, norm=norm)
        nxt = logits.data[:, -1].argmax(axis=-1)
        for b in np.flatnonzero(~done):
            if nxt[b] == vocab.eos:
                done[b] = True
            else:
                hyps[b].append(int(nxt[b]))
        if done.all():
            break
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return hyps


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def token_error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total Levenshtein edits over total reference length."""
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("references are empty")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total
