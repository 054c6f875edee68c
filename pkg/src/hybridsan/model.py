"""Encoder-decoder model assembly, parameter naming and batching."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .decoder import (DecoderWeights, TokenVocab, ctc_feasible, ctc_loss_batch, decoder_forward,
                      greedy_decode, joint_loss, label_smoothing_ce)
from .encoder import EncoderConfig, EncoderOutput, EncoderWeights, encode
from .tensor import Tensor, index_select, log_softmax, matmul, scale, tsum


class ManifestMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_layers: int = 2
    vocab_size: int = 16


@dataclass
class Utterance:
    features: np.ndarray  # (T, F)
    target: tuple[int, ...]


@dataclass
class Batch:
    features: np.ndarray  # (B, T_max, F), zero padded
    lengths: np.ndarray
    targets: list[list[int]]

    @classmethod
    def from_utterances(cls, utts: Sequence[Utterance], pad_frames: int = 0) -> "Batch":
        lengths = np.array([u.features.shape[0] for u in utts])
        F = utts[0].features.shape[1]
        feats = np.zeros((len(utts), lengths.max() + pad_frames, F))
        for i, u in enumerate(utts):
            feats[i, :lengths[i]] = u.features
        return cls(feats, lengths, [list(u.target) for u in utts])

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class LossParts:
    total: Tensor
    dec: float
    ctc: float


def iter_named(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted name, tensor) for every Tensor reachable through dataclasses and lists."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_named(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_named(item, f"{prefix}.{i}")


@dataclass
class Model:
    config: ModelConfig
    encoder: EncoderWeights
    decoder: DecoderWeights

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        enc = config.encoder
        return cls(config, EncoderWeights.init(enc, rng),
                   DecoderWeights.init(config.vocab_size, enc.d_att, enc.d_ff, enc.h,
                                       config.decoder_layers, rng))

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(iter_named(self.encoder, "encoder")) | dict(iter_named(self.decoder, "decoder"))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                raise ManifestMismatch(f"checkpoint lacks tensor {name}")
            if state[name].shape != p.shape:
                raise ManifestMismatch(f"tensor {name}: checkpoint shape {state[name].shape} "
                                       f"!= model shape {p.shape}")
        extra = sorted(set(state) - set(params))
        if extra:
            raise ManifestMismatch(f"checkpoint has unexpected tensor {extra[0]}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float64)

    def run_encoder(self, batch: Batch, rng: np.random.Generator | None = None,
                    capture: bool = False) -> EncoderOutput:
        return encode(Tensor(batch.features), self.config.encoder, self.encoder, batch.lengths,
                      rng=rng, capture=capture)

    def ctc_log_probs(self, enc: Tensor) -> Tensor:
        return log_softmax(matmul(enc, self.decoder.ctc_w) + self.decoder.ctc_b)

    def loss(self, batch: Batch, vocab: TokenVocab, lam: float, smoothing: float = 0.1,
             rng: np.random.Generator | None = None) -> LossParts:
        """Joint objective (1 - lam) * decoder CE + lam * CTC on one padded batch."""
        enc = self.run_encoder(batch, rng)
        cfg = self.config.encoder
        L = max(len(t) for t in batch.targets) + 1
        ys_in = np.full((len(batch), L), vocab.pad, dtype=np.int64)
        ys_out = np.full((len(batch), L), vocab.pad, dtype=np.int64)
        for i, t in enumerate(batch.targets):
            ys_in[i, :len(t) + 1] = [vocab.sos, *t]
            ys_out[i, :len(t) + 1] = [*t, vocab.eos]
        tok_len = np.array([len(t) + 1 for t in batch.targets])
        logits = decoder_forward(enc.out, enc.lengths, ys_in, self.decoder, tok_len, norm=cfg.norm,
                                 dropout_rate=cfg.dropout, rng=rng)
        valid = np.arange(L)[None, :] < tok_len[:, None]
        ld = label_smoothing_ce(logits, ys_out, smoothing, valid)
        if lam == 0.0:
            return LossParts(ld, ld.item(), float("nan"))
        keep = [i for i, t in enumerate(batch.targets) if ctc_feasible(int(enc.lengths[i]), t)]
        if not keep:
            raise ValueError("no utterance in the batch admits a CTC alignment")
        lp = self.ctc_log_probs(enc.out)
        if len(keep) < len(batch):
            lp = index_select(lp, keep)
        per = ctc_loss_batch(lp, enc.lengths[keep], [batch.targets[i] for i in keep], vocab.blank)
        lctc = scale(tsum(per), 1.0 / len(keep))
        return LossParts(joint_loss(ld, lctc, lam), ld.item(), lctc.item())

    def decode(self, batch: Batch, vocab: TokenVocab, max_len: int) -> list[list[int]]:
        enc = self.run_encoder(batch)
        return greedy_decode(enc.out, enc.lengths, self.decoder, vocab, max_len,
                             norm=self.config.encoder.norm)
