"""Hybrid encoder: conv subsampling, sinusoidal positions, then a stack of
self-attention (SA) and feed-forward replacement (FF) layers in any order."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .attention import AttentionRecord, MhaWeights, multi_head_attention
from .tensor import (DimensionError, Tensor, conv2d, dropout, layer_norm, matmul,
                     relu, reshape, transpose)


class LayerKind(str, enum.Enum):
    SA = "SA"
    FF = "FF"


class SequenceTooShort(ValueError):
    pass


@dataclass
class SubsampleSpec:
    channels: int = 256
    kernel: int = 3
    stride: int = 2
    num_layers: int = 2

    def out_length(self, t: int) -> int:
        for _ in range(self.num_layers):
            t = (t - self.kernel) // self.stride + 1
        return t

    def min_length(self) -> int:
        t = 1
        while self.out_length(t) < 1:
            t += 1
        return t


@dataclass
class EncoderConfig:
    layer_kinds: list[LayerKind] = field(default_factory=lambda: [LayerKind.SA] * 12)
    d_att: int = 256
    d_ff: int = 2048
    h: int = 4
    dropout: float = 0.1
    input_dim: int = 83
    subsample: SubsampleSpec = field(default_factory=SubsampleSpec)
    norm: str = "pre"  # "pre" or "post"

    def __post_init__(self):
        self.layer_kinds = [LayerKind(k) for k in self.layer_kinds]
        if not self.layer_kinds:
            raise ValueError("encoder needs at least one layer")
        if self.d_att % 2:
            raise ValueError(f"d_att must be even for sinusoidal positions, got {self.d_att}")
        if self.norm not in ("pre", "post"):
            raise ValueError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        kinds = self.layer_kinds
        if any(a == LayerKind.FF and b == LayerKind.SA for a, b in zip(kinds, kinds[1:])):
            warnings.warn("an SA layer sits above an FF layer; replacement layers are "
                          "meant to occupy the top of the stack", stacklevel=2)

    @property
    def num_sa(self) -> int:
        return sum(k == LayerKind.SA for k in self.layer_kinds)

    @property
    def num_ff(self) -> int:
        return sum(k == LayerKind.FF for k in self.layer_kinds)


def _param(rng, shape, std) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


def _ones(d) -> Tensor:
    return Tensor(np.ones(d), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class FfLayerWeights:
    s: Tensor  # (d_att, d_ff)
    v_ff: Tensor  # (d_ff, d_att)
    b: Tensor  # (d_ff,)
    r: Tensor  # (d_att,)
    ln_gamma: Tensor
    ln_beta: Tensor

    def __post_init__(self):
        d, dff = self.s.shape
        expected = {"v_ff": (dff, d), "b": (dff,), "r": (d,), "ln_gamma": (d,), "ln_beta": (d,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def init(cls, d: int, d_ff: int, rng: np.random.Generator) -> "FfLayerWeights":
        return cls(s=_param(rng, (d, d_ff), 1 / math.sqrt(d)),
                   v_ff=_param(rng, (d_ff, d), 1 / math.sqrt(d_ff)),
                   b=_zeros(d_ff), r=_zeros(d), ln_gamma=_ones(d), ln_beta=_zeros(d))


@dataclass
class SaLayerWeights:
    mha: MhaWeights
    ff: FfLayerWeights
    ln2_gamma: Tensor  # normalizes the MHA input
    ln2_beta: Tensor

    def __post_init__(self):
        if self.mha.d_att != self.ff.s.shape[0]:
            raise DimensionError("MHA width and FF input width differ")

    @classmethod
    def init(cls, d: int, d_ff: int, h: int, rng: np.random.Generator) -> "SaLayerWeights":
        return cls(mha=MhaWeights.init(h, d, rng), ff=FfLayerWeights.init(d, d_ff, rng),
                   ln2_gamma=_ones(d), ln2_beta=_zeros(d))


@dataclass
class FrontendWeights:
    convs: list[tuple[Tensor, Tensor]]  # (kernel (C, Cin, k, k), bias (C, 1, 1))
    proj_w: Tensor  # (C * F', d_att)
    proj_b: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "FrontendWeights":
        sub = cfg.subsample
        convs, cin, f = [], 1, cfg.input_dim
        for _ in range(sub.num_layers):
            fan_in = cin * sub.kernel ** 2
            convs.append((_param(rng, (sub.channels, cin, sub.kernel, sub.kernel),
                                 math.sqrt(2.0 / fan_in)),
                          _zeros(sub.channels, 1, 1)))
            cin = sub.channels
            f = (f - sub.kernel) // sub.stride + 1
        if f < 1:
            raise ValueError(f"input_dim={cfg.input_dim} too small for the conv front-end")
        flat = sub.channels * f
        return cls(convs, _param(rng, (flat, cfg.d_att), 1 / math.sqrt(flat)), _zeros(cfg.d_att))


@dataclass
class EncoderWeights:
    frontend: FrontendWeights
    layers: list[Union[SaLayerWeights, FfLayerWeights]]
    final_gamma: Tensor
    final_beta: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "EncoderWeights":
        layers = [SaLayerWeights.init(cfg.d_att, cfg.d_ff, cfg.h, rng) if k == LayerKind.SA
                  else FfLayerWeights.init(cfg.d_att, cfg.d_ff, rng) for k in cfg.layer_kinds]
        return cls(FrontendWeights.init(cfg, rng), layers, _ones(cfg.d_att), _zeros(cfg.d_att))


def sinusoidal_pe(n: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError("positional encoding width must be even")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def subsample_frontend(features: Tensor, w: FrontendWeights, spec: SubsampleSpec) -> Tensor:
    """(B, T, F) or (T, F) features -> (B, T', d_att) frames, T' = f(f(T))."""
    squeeze = features.ndim == 2
    x = reshape(features, (1,) * squeeze + features.shape)
    if spec.out_length(x.shape[1]) < 1:
        raise SequenceTooShort(f"sequence too short after subsampling: T={x.shape[1]}, "
                               f"need at least {spec.min_length()} frames")
    x = reshape(x, (x.shape[0], 1) + x.shape[1:])
    for kernel, bias in w.convs:
        x = relu(conv2d(x, kernel, spec.stride) + bias)
    b, c, t, f = x.shape
    x = reshape(transpose(x, (0, 2, 1, 3)), (b, t, c * f))
    out = matmul(x, w.proj_w) + w.proj_b
    return reshape(out, out.shape[1:]) if squeeze else out


def ff_layer_forward(x: Tensor, w: FfLayerWeights, *, norm: str = "pre", dropout_rate: float = 0.0,
                     rng: np.random.Generator | None = None) -> Tensor:
    """x + ReLU(LN(x) S + b) v_ff + r, applied to every frame independently."""
    if x.shape[-1] != w.s.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != d_att {w.s.shape[0]}")
    inner = layer_norm(x, w.ln_gamma, w.ln_beta) if norm == "pre" else x
    branch = matmul(relu(matmul(inner, w.s) + w.b), w.v_ff) + w.r
    out = x + dropout(branch, dropout_rate, rng)
    return out if norm == "pre" else layer_norm(out, w.ln_gamma, w.ln_beta)


def sa_layer_forward(x: Tensor, w: SaLayerWeights, mask: np.ndarray | None = None, *,
                     norm: str = "pre", dropout_rate: float = 0.0,
                     rng: np.random.Generator | None = None,
                     attn_override: np.ndarray | None = None,
                     layer_index: int = -1) -> tuple[Tensor, list[AttentionRecord]]:
    """x' = x + MHA(x, x, x); out = FF-block residual over x'. Normalization per ``norm``."""
    if x.shape[-1] != w.mha.d_att:
        raise DimensionError(f"input width {x.shape[-1]} != d_att {w.mha.d_att}")
    u = layer_norm(x, w.ln2_gamma, w.ln2_beta) if norm == "pre" else x
    att, records = multi_head_attention(u, u, u, w.mha, mask, attn_override=attn_override,
                                        dropout_rate=dropout_rate, rng=rng,
                                        layer_index=layer_index)
    xp = x + dropout(att, dropout_rate, rng)
    if norm == "post":
        xp = layer_norm(xp, w.ln2_gamma, w.ln2_beta)
    return ff_layer_forward(xp, w.ff, norm=norm, dropout_rate=dropout_rate, rng=rng), records


def key_mask(lengths: np.ndarray, n: int) -> np.ndarray:
    """(B, 1, n) boolean mask, True on valid key positions."""
    return (np.arange(n)[None, :] < np.asarray(lengths)[:, None])[:, None, :]


@dataclass
class EncoderOutput:
    out: Tensor  # (B, T', d_att)
    lengths: np.ndarray  # (B,)
    records: list[list[AttentionRecord]]  # one group per SA layer, if captured
    layer_inputs: list[Tensor] = field(default_factory=list)  # stream entering each layer


def encode(features: Tensor, cfg: EncoderConfig, w: EncoderWeights,
           lengths: np.ndarray | None = None, *, rng: np.random.Generator | None = None,
           capture: bool = False) -> EncoderOutput:
    """Run the full encoder on a padded batch (B, T, F) with per-utterance ``lengths``.

    Attention records and per-layer input streams are kept only when ``capture``.
    """
    if len(w.layers) != len(cfg.layer_kinds):
        raise DimensionError(f"{len(w.layers)} weight layers for {len(cfg.layer_kinds)} configured")
    if features.ndim == 2:
        features = reshape(features, (1,) + features.shape)
    if features.shape[-1] != cfg.input_dim:
        raise DimensionError(f"feature dim {features.shape[-1]} != input_dim {cfg.input_dim}")
    if lengths is None:
        lengths = np.full(features.shape[0], features.shape[1])
    x = subsample_frontend(features, w.frontend, cfg.subsample)
    out_lengths = np.array([cfg.subsample.out_length(int(t)) for t in lengths])
    if out_lengths.min() < 1:
        raise SequenceTooShort("sequence too short after subsampling")
    n = x.shape[1]
    x = x * math.sqrt(cfg.d_att) + Tensor(sinusoidal_pe(n, cfg.d_att))
    x = dropout(x, cfg.dropout, rng)
    mask = key_mask(out_lengths, n)
    groups, inputs = [], []
    for i, (kind, lw) in enumerate(zip(cfg.layer_kinds, w.layers)):
        if capture:
            inputs.append(x)
        if kind == LayerKind.SA:
            if not isinstance(lw, SaLayerWeights):
                raise DimensionError(f"layer {i} is configured SA but holds {type(lw).__name__}")
            x, recs = sa_layer_forward(x, lw, mask, norm=cfg.norm, dropout_rate=cfg.dropout,
                                       rng=rng, layer_index=i)
            if capture:
                groups.append(recs)
        else:
            if not isinstance(lw, FfLayerWeights):
                raise DimensionError(f"layer {i} is configured FF but holds {type(lw).__name__}")
            x = ff_layer_forward(x, lw, norm=cfg.norm, dropout_rate=cfg.dropout, rng=rng)
    if cfg.norm == "pre":
        x = layer_norm(x, w.final_gamma, w.final_beta)
    return EncoderOutput(x, out_lengths, groups, inputs)
