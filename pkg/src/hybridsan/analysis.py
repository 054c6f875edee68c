"""Attention diagnostics, parameter arithmetic and runtime scaling benchmarks."""

from __future__ import annotations

import csv
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import multi_head_attention
from .encoder import (EncoderConfig, FfLayerWeights, LayerKind, SaLayerWeights, ff_layer_forward,
                      sa_layer_forward)
from .tensor import Tensor, layer_norm

BANDWIDTHS = (0, 1, 2, 4)

# records[utterance][sa_layer][head] -> (n, n) matrix
AttentionDump = list[list[list[np.ndarray]]]


def _check_stochastic(a: np.ndarray, tol: float = 1e-4) -> None:
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if np.any(a < -tol) or np.max(np.abs(a.sum(axis=1) - 1.0)) > tol:
        raise ValueError("attention matrix is not row-stochastic")


def diagonality(a: np.ndarray, w: int) -> float:
    """Fraction of row mass within the band |i - j| <= w, averaged over rows."""
    a = np.asarray(a, dtype=np.float64)
    _check_stochastic(a)
    if w < 0:
        raise ValueError("bandwidth must be non-negative")
    n, m = a.shape
    band = np.abs(np.arange(n)[:, None] - np.arange(m)[None, :]) <= w
    return float((a * band).sum() / n)


def mean_offset(a: np.ndarray) -> float:
    """Average |i - j| weighted by attention mass."""
    n, m = a.shape
    dist = np.abs(np.arange(n)[:, None] - np.arange(m)[None, :])
    return float((a * dist).sum() / n)


def _interp_matrix(n: int, grid: int) -> np.ndarray:
    """(grid, n) linear-interpolation weights, endpoints aligned."""
    r = np.zeros((grid, n))
    if n == 1:
        r[:, 0] = 1.0
        return r
    pos = np.linspace(0.0, n - 1, grid)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    r[np.arange(grid), lo] = 1.0 - frac
    r[np.arange(grid), lo + 1] += frac
    return r


def resample(a: np.ndarray, grid: int) -> np.ndarray:
    """Bilinear resample to grid x grid and renormalize rows to sum to one."""
    n, m = a.shape
    out = _interp_matrix(n, grid) @ a @ _interp_matrix(m, grid).T
    return out / out.sum(axis=1, keepdims=True)


def average_attention(records: AttentionDump, grid: int = 32) -> np.ndarray:
    """Corpus-averaged maps, shape (layers, heads, grid, grid)."""
    if grid < 2:
        raise ValueError("grid must be at least 2")
    if not records:
        raise ValueError("no attention records to average")
    acc = None
    for utt in records:
        maps = np.array([[resample(np.asarray(h), grid) for h in layer] for layer in utt])
        acc = maps if acc is None else acc + maps
    return acc / len(records)


@dataclass
class DiagonalityReport:
    # scores[layer][head][w] = D_w averaged over utterances
    scores: list[list[dict[int, float]]]
    offsets: list[list[float]]
    bandwidths: tuple[int, ...] = BANDWIDTHS

    def layer_mean(self, layer: int, w: int) -> float:
        return float(np.mean([h[w] for h in self.scores[layer]]))

    def rows(self) -> list[tuple[int, int, int, float]]:
        return [(li + 1, hi, w, s[w]) for li, layer in enumerate(self.scores)
                for hi, s in enumerate(layer) for w in self.bandwidths]


def diagonality_report(records: AttentionDump,
                       bandwidths: Sequence[int] = BANDWIDTHS) -> DiagonalityReport:
    if not records:
        raise ValueError("no attention records")
    n_layers, n_heads = len(records[0]), len(records[0][0])
    scores = [[{w: float(np.mean([diagonality(u[l][h], w) for u in records])) for w in bandwidths}
               for h in range(n_heads)] for l in range(n_layers)]
    offsets = [[float(np.mean([mean_offset(u[l][h]) for u in records])) for h in range(n_heads)]
               for l in range(n_layers)]
    return DiagonalityReport(scores, offsets, tuple(bandwidths))


def mha_identity_residual(layer: SaLayerWeights, inputs: Sequence[Tensor], norm: str = "pre",
                          attn_override: np.ndarray | None = None) -> float:
    """Mean over samples of ||MHA(u, u, u) - u||_F / ||u||_F.

    ``u`` is what the attention block actually consumes: the normalized layer
    input under pre-norm, the raw layer input under post-norm.
    """
    ratios = []
    for x in inputs:
        u = layer_norm(x, layer.ln2_gamma, layer.ln2_beta) if norm == "pre" else x
        denom = np.linalg.norm(u.data)
        if denom == 0:
            raise ValueError("zero-norm input to the attention block")
        out, _ = multi_head_attention(u, u, u, layer.mha, attn_override=attn_override)
        ratios.append(np.linalg.norm(out.data - u.data) / denom)
    return float(np.mean(ratios))


# ---------------------------------------------------------------- parameter counts

def ff_layer_params(d: int, d_ff: int) -> int:
    return d * d_ff + d_ff + d_ff * d + d + 2 * d


def sa_layer_params(d: int, d_ff: int, h: int) -> int:
    return ff_layer_params(d, d_ff) + 2 * d + h * 3 * d * d + h * d * d


def frontend_params(cfg: EncoderConfig) -> int:
    sub = cfg.subsample
    total, cin, f = 0, 1, cfg.input_dim
    for _ in range(sub.num_layers):
        total += sub.channels * cin * sub.kernel ** 2 + sub.channels
        cin = sub.channels
        f = (f - sub.kernel) // sub.stride + 1
    return total + sub.channels * f * cfg.d_att + cfg.d_att + 2 * cfg.d_att  # proj + final LN


@dataclass
class ParamCount:
    frontend: int
    per_layer: list[int]

    @property
    def total(self) -> int:
        return self.frontend + sum(self.per_layer)


def param_count(cfg: EncoderConfig) -> ParamCount:
    per = [sa_layer_params(cfg.d_att, cfg.d_ff, cfg.h) if k == LayerKind.SA
           else ff_layer_params(cfg.d_att, cfg.d_ff) for k in cfg.layer_kinds]
    return ParamCount(frontend_params(cfg), per)


# ---------------------------------------------------------------- benchmarks

@dataclass
class BenchReport:
    kind: str
    lengths: list[int]
    times: list[float]  # median seconds per forward pass
    repeats: int
    slope: float
    params: int
    meta: dict = field(default_factory=dict)

    def doubling_ratio(self) -> float:
        return self.times[-1] / self.times[-2]


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def time_scaling_bench(kind: str, lengths: Sequence[int] = (64, 128, 256, 512, 1024),
                       repeats: int = 7, d: int = 256, d_ff: int = 2048, h: int = 4,
                       seed: int = 0) -> BenchReport:
    """Median single-threaded forward time of one SA or FF layer per sequence length."""
    from threadpoolctl import threadpool_limits

    kind = LayerKind(kind)
    lengths = [int(n) for n in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly increasing")
    if repeats < 5:
        raise ValueError("need at least 5 repeats")
    rng = np.random.default_rng(seed)
    if kind == LayerKind.SA:
        w = SaLayerWeights.init(d, d_ff, h, rng)
        run = lambda x: sa_layer_forward(x, w)  # noqa: E731
        params = sa_layer_params(d, d_ff, h)
    else:
        w = FfLayerWeights.init(d, d_ff, rng)
        run = lambda x: ff_layer_forward(x, w)  # noqa: E731
        params = ff_layer_params(d, d_ff)
    times = []
    with threadpool_limits(limits=1):
        for n in lengths:
            x = Tensor(rng.normal(size=(n, d)))
            run(x)  # warm-up
            reps = repeats
            while True:
                samples = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    run(x)
                    samples.append(time.perf_counter() - t0)
                if sum(samples) >= 1e-3:
                    break
                reps *= 2
            times.append(statistics.median(samples))
    return BenchReport(kind.value, lengths, times, repeats, fit_loglog_slope(lengths, times), params,
                       meta={"threads": 1, "exclusive": True, "d_att": d, "d_ff": d_ff, "h": h})


# ---------------------------------------------------------------- artifacts

def write_pgm(path: str | os.PathLike, a: np.ndarray) -> None:
    """8-bit binary grayscale image, brightest = largest entry."""
    a = np.asarray(a, dtype=np.float64)
    peak = a.max()
    img = np.zeros(a.shape, dtype=np.uint8) if peak <= 0 else np.round(255 * a / peak).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: unsupported PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_matrix_csv(path: str | os.PathLike, a: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows([[repr(float(v)) for v in row] for row in a])
