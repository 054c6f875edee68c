"""Optimizer, learning-rate schedule, training loop, checkpoint averaging and the
synthetic monotonic-alignment task."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import TokenVocab, token_error_rate
from .model import Batch, ManifestMismatch, Model, Utterance
from .serialization import load_checkpoint, save_checkpoint
from .tensor import Tape, backward

log = logging.getLogger(__name__)

TIMING_FIELDS = ("seconds",)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    lam: float = 0.3
    avg_last: int = 10
    seed: int = 0
    grad_clip: float = 5.0
    label_smoothing: float = 0.1
    bucket_size: int = 8  # batches per length-sorted bucket

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 1 <= self.avg_last <= self.epochs:
            raise ValueError("avg_last must lie in [1, epochs]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


def noam_lr(step: int, warmup: int, d_att: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * d_att ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def average_checkpoints(paths: Sequence[str | os.PathLike]) -> dict[str, np.ndarray]:
    if not paths:
        raise ValueError("need at least one checkpoint")
    states = [load_checkpoint(p) for p in paths]
    ref = states[0]
    for path, st in zip(paths[1:], states[1:]):
        for (n1, a), (n2, b) in zip(ref.items(), st.items()):
            if n1 != n2 or a.shape != b.shape:
                raise ManifestMismatch(f"{path}: tensor {n2} {b.shape} differs from {n1} {a.shape}")
        if len(st) != len(ref):
            first = sorted(set(ref) ^ set(st))[0]
            raise ManifestMismatch(f"{path}: tensor {first} present in only one checkpoint")
    return {name: sum(st[name] for st in states) / len(states) for name in ref}


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthTaskSpec:
    vocab_size: int = 12
    min_len: int = 6
    max_len: int = 14
    feat_dim: int = 16
    repeat_lo: int = 4
    repeat_hi: int = 8
    noise: float = 0.1
    num_utterances: int = 2000
    units_per_token: int = 1  # >1: each token is a fixed sequence of shared acoustic units
    num_units: int = 0  # size of the unit inventory; 0 means one unit per token
    template_seed: int = 0
    shared_units: bool = False  # one inventory for every spelling slot; order then matters

    def __post_init__(self):
        if self.repeat_lo < 1 or self.repeat_hi < self.repeat_lo:
            raise ValueError("need 1 <= repeat_lo <= repeat_hi")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.units_per_token > 1 and _num_spellings(self) < self.vocab_size:
            raise ValueError("unit inventory too small to give every token a distinct spelling")


def _num_spellings(spec: SynthTaskSpec) -> int:
    k, nu = spec.units_per_token, spec.num_units
    return nu * (nu - 1) ** (k - 1) if spec.shared_units else nu ** k


def task_templates(spec: SynthTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """(unit templates, token spellings (vocab, units_per_token) of unit ids).

    With several units per token, spelling position k draws from its own
    inventory of ``num_units`` templates, like onset/nucleus slots of a
    syllable, and tokens take distinct random combinations. With
    ``shared_units`` all positions share one inventory and adjacent units
    differ, so tokens can be anagrams of each other and only unit order tells
    them apart.
    """
    rng = np.random.default_rng(spec.template_seed)
    if spec.units_per_token == 1:
        return rng.normal(size=(spec.vocab_size, spec.feat_dim)), np.arange(spec.vocab_size)[:, None]
    k, nu = spec.units_per_token, spec.num_units
    digits = np.array(list(np.ndindex(*(nu,) * k)))  # every spelling, lexicographic
    if spec.shared_units:
        templates = rng.normal(size=(nu, spec.feat_dim))
        digits = digits[np.all(digits[:, 1:] != digits[:, :-1], axis=1)]
    else:
        templates = rng.normal(size=(k * nu, spec.feat_dim))
        digits = digits + nu * np.arange(k)
    return templates, digits[rng.choice(len(digits), spec.vocab_size, replace=False)]


def gen_synthetic(spec: SynthTaskSpec, seed: int, vocab: TokenVocab | None = None) -> list[Utterance]:
    """Token sequences rendered as noisy, strictly left-to-right template frames.

    Every unit of every token is held for a random number of frames in
    [repeat_lo, repeat_hi], then Gaussian noise of scale ``noise`` is added.
    """
    vocab = vocab or TokenVocab.synthetic(spec.vocab_size)
    templates, spell = task_templates(spec)
    rng = np.random.default_rng(seed)
    utts = []
    for _ in range(spec.num_utterances):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        tokens = rng.integers(0, spec.vocab_size, length)
        units = spell[tokens].reshape(-1)
        reps = rng.integers(spec.repeat_lo, spec.repeat_hi + 1, units.size)
        feats = np.repeat(templates[units], reps, axis=0)
        feats = feats + spec.noise * rng.normal(size=feats.shape)
        utts.append(Utterance(feats, tuple(int(t) + vocab.first_content for t in tokens)))
    return utts


# ---------------------------------------------------------------- training loop

def make_batches(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator,
                 bucket_size: int = 8) -> list[list[int]]:
    """Shuffle, sort by length inside buckets of ``bucket_size`` batches, then shuffle batches."""
    order = rng.permutation(len(utts))
    span = batch_size * bucket_size
    batches = []
    for start in range(0, len(order), span):
        chunk = sorted(order[start:start + span], key=lambda i: utts[i].features.shape[0])
        batches += [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def evaluate(model: Model, utts: Sequence[Utterance], vocab: TokenVocab,
             batch_size: int = 100) -> tuple[float, list[list[int]]]:
    hyps: list[list[int]] = []
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        max_len = max(len(u.target) for u in chunk) + 5
        hyps += model.decode(Batch.from_utterances(chunk), vocab, max_len)
    return token_error_rate([u.target for u in utts], hyps), hyps


@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoints: list[Path]


def train(model: Model, train_set: Sequence[Utterance], valid_set: Sequence[Utterance],
          cfg: TrainConfig, vocab: TokenVocab, out_dir: str | os.PathLike | None = None,
          ) -> TrainResult:
    """Train with the joint loss; one checkpoint and one metrics line per epoch.

    Deterministic given ``cfg.seed``. Raises DivergenceError on a non-finite loss.
    """
    if not train_set:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed + 7919)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "w")
    params = model.named_parameters()
    state = OptimizerState()
    metrics, ckpts = [], []
    d_att = model.config.encoder.d_att
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            tot = dec = ctc = 0.0
            batches = make_batches(train_set, cfg.batch_size, rng, cfg.bucket_size)
            for idx in batches:
                batch = Batch.from_utterances([train_set[i] for i in idx])
                for p in params.values():
                    p.zero_grad()
                with Tape() as tape:
                    parts = model.loss(batch, vocab, cfg.lam, cfg.label_smoothing, rng)
                loss = parts.total.item()
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss {loss} at step {state.step + 1}")
                backward(parts.total, tape, leaves=params.values())
                grads = {k: p.grad for k, p in params.items()}
                clip_grad_norm(grads, cfg.grad_clip)
                lr = noam_lr(state.step + 1, cfg.warmup_steps, d_att, cfg.lr_scale)
                adam_step({k: p.data for k, p in params.items()}, grads, state, lr)
                tot += loss
                dec += parts.dec
                ctc += parts.ctc
            n = len(batches)
            err = evaluate(model, valid_set, vocab)[0] if valid_set else float("nan")
            row = {"epoch": epoch, "step": state.step, "lr": lr, "train_loss": tot / n,
                   "ctc_loss": ctc / n, "dec_loss": dec / n, "valid_token_error": err,
                   "seconds": round(time.perf_counter() - t0, 3)}
            row = {k: None if isinstance(v, float) and not math.isfinite(v) else v
                   for k, v in row.items()}  # JSON has no NaN
            metrics.append(row)
            log.info("epoch %d loss %.4f valid err %.4f", epoch, tot / n, err)
            if out is not None:
                metrics_file.write(json.dumps(row) + "\n")
                metrics_file.flush()
                path = out / f"epoch{epoch:03d}.ckpt"
                save_checkpoint(path, model.state())
                ckpts.append(path)
    finally:
        if out is not None:
            metrics_file.close()
    return TrainResult(metrics, ckpts)


def strip_timing(line: str) -> str:
    row = json.loads(line)
    for k in TIMING_FIELDS:
        row.pop(k, None)
    return json.dumps(row)
