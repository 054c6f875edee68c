"""End-to-end experiment runners shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as config_mod
from .analysis import (AttentionDump, DiagonalityReport, average_attention, diagonality_report,
                       mha_identity_residual)
from .config import ExperimentConfig, format_layers, parse_layers
from .decoder import TokenVocab
from .encoder import EncoderConfig, LayerKind, SubsampleSpec
from .model import Batch, Model, ModelConfig, Utterance
from .serialization import load_checkpoint, read_feature_dir, save_checkpoint
from .tensor import Tensor
from .training import SynthTaskSpec, TrainConfig, average_checkpoints, evaluate, gen_synthetic, train

log = logging.getLogger(__name__)


def load_datasets(cfg: ExperimentConfig) -> tuple[list[Utterance], list[Utterance], TokenVocab]:
    vocab = cfg.vocab()
    if cfg.data.feature_dir is not None:
        train_set = read_feature_dir(cfg.data.feature_dir)
        valid_set = read_feature_dir(cfg.data.valid_dir) if cfg.data.valid_dir else []
        dims = {u.features.shape[1] for u in train_set}
        if dims != {cfg.model.encoder.input_dim}:
            raise config_mod.ConfigError("model.encoder.input_dim",
                                         f"does not match feature dims {sorted(dims)}")
        return train_set, valid_set, vocab
    spec = cfg.data.synthetic
    train_set = gen_synthetic(spec, cfg.data.seed, vocab)
    valid_spec = dataclasses.replace(spec, num_utterances=cfg.data.valid_utterances)
    return train_set, gen_synthetic(valid_spec, cfg.data.seed + 1, vocab), vocab


def validation_set(cfg: ExperimentConfig) -> list[Utterance]:
    if cfg.data.feature_dir is not None:
        return read_feature_dir(cfg.data.valid_dir) if cfg.data.valid_dir else []
    spec = dataclasses.replace(cfg.data.synthetic, num_utterances=cfg.data.valid_utterances)
    return gen_synthetic(spec, cfg.data.seed + 1, cfg.vocab())


def run_training(cfg: ExperimentConfig, run_dir: str | os.PathLike) -> dict:
    """Train, write per-epoch checkpoints, metrics and the averaged ``final.ckpt``.

    Returns a summary with the validation token error of the averaged model.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config_mod.dumps(cfg) + "\n")
    train_set, valid_set, vocab = load_datasets(cfg)
    model = Model.init(cfg.model, cfg.train.seed)
    result = train(model, train_set, valid_set, cfg.train, vocab, run_dir)
    final = average_checkpoints(result.checkpoints[-cfg.train.avg_last:])
    save_checkpoint(run_dir / "final.ckpt", final)
    model.load_state(final)
    summary = {"layers": format_layers(cfg.model.encoder.layer_kinds), "seed": cfg.train.seed,
               "epochs": cfg.train.epochs}
    if valid_set:
        summary["final_token_error"] = evaluate(model, valid_set, vocab)[0]
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------- sweep

def _run_cell(args) -> dict:
    raw, split, seed, cell_dir = args
    row = {"split": split, "seed": seed, "token_error": "", "status": "ok"}
    try:
        cfg = config_mod.resolve(raw, layers=split, seed=seed)
        row["token_error"] = run_training(cfg, cell_dir)["final_token_error"]
    except Exception as exc:  # a failed cell is recorded, the sweep carries on
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
        log.exception("sweep cell %s seed %s failed", split, seed)
    return row


def sweep(base: ExperimentConfig, splits: Sequence[str], seeds: Sequence[int],
          out_dir: str | os.PathLike, jobs: int = 1) -> list[dict]:
    """Train every (split, seed) cell; write ``sweep.csv`` with per-split means appended."""
    total = len(base.model.encoder.layer_kinds)
    for s in splits:
        if len(parse_layers(s)) != total:
            raise config_mod.ConfigError("--splits", f"{s} does not have {total} layers")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = config_mod.to_dict(base)
    tasks = [(raw, s, seed, out_dir / "cells" / f"{s}-seed{seed}") for s in splits for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    means = []
    for s in splits:
        errs = [r["token_error"] for r in rows if r["split"] == s and r["status"] == "ok"]
        means.append({"split": s, "seed": "mean", "token_error": float(np.mean(errs)) if errs else "",
                      "status": "ok" if errs else "no successful cells"})
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["split", "seed", "token_error", "status"])
        writer.writeheader()
        writer.writerows(rows + means)
    return rows + means


# ---------------------------------------------------------------- attention analysis

@dataclass
class AnalysisResult:
    dump: AttentionDump  # [utterance][sa layer][head] -> (n, n)
    averaged: np.ndarray  # (sa layers, heads, grid, grid)
    report: DiagonalityReport
    residuals: list[float]  # one per SA layer, bottom first
    sa_layers: list[int]  # encoder layer index of each SA layer


def analyze(model: Model, utts: Sequence[Utterance], grid: int = 16,
            batch_size: int = 50) -> AnalysisResult:
    """Attention maps, diagonality and MHA~identity residuals over ``utts``."""
    cfg = model.config.encoder
    sa_idx = [i for i, k in enumerate(cfg.layer_kinds) if k == LayerKind.SA]
    if not sa_idx:
        raise ValueError("the encoder has no self-attention layers to analyze")
    dump: AttentionDump = []
    inputs: list[list[Tensor]] = [[] for _ in sa_idx]
    for start in range(0, len(utts), batch_size):
        batch = Batch.from_utterances(utts[start:start + batch_size])
        enc = model.run_encoder(batch, capture=True)
        for b, n in enumerate(enc.lengths):
            dump.append([[rec.matrix[b, :n, :n].copy() for rec in group] for group in enc.records])
            for j, li in enumerate(sa_idx):
                inputs[j].append(Tensor(enc.layer_inputs[li].data[b, :n]))
    residuals = [mha_identity_residual(model.encoder.layers[li], inputs[j], cfg.norm)
                 for j, li in enumerate(sa_idx)]
    return AnalysisResult(dump, average_attention(dump, grid), diagonality_report(dump),
                          residuals, sa_idx)


# ---------------------------------------------------------------- toy task presets

def toy_task() -> SynthTaskSpec:
    """Synthetic task used for the layer-split trend experiment."""
    return SynthTaskSpec(vocab_size=12, min_len=6, max_len=14, feat_dim=16, repeat_lo=6,
                         repeat_hi=10, noise=0.1, num_utterances=2000, units_per_token=3,
                         num_units=3, shared_units=True)


def toy_config(layers: str = "4sa+0ff", seed: int = 0, epochs: int = 30) -> ExperimentConfig:
    task = toy_task()
    enc = EncoderConfig(layer_kinds=parse_layers(layers), d_att=64, d_ff=128, h=4, dropout=0.0,
                        input_dim=task.feat_dim, subsample=SubsampleSpec(channels=16))
    cfg = ExperimentConfig(
        model=ModelConfig(encoder=enc, decoder_layers=1, vocab_size=task.vocab_size + 4),
        train=TrainConfig(batch_size=32, epochs=epochs, warmup_steps=300, lr_scale=0.5, lam=0.3,
                          avg_last=min(5, epochs), seed=seed, grad_clip=5.0),
        data=config_mod.DataConfig(synthetic=task, valid_utterances=200, seed=1))
    cfg.validate()
    return cfg


TREND_SPLITS = ("4sa+0ff", "3sa+1ff", "2sa+2ff", "1sa+3ff", "0sa+4ff")
_TRAINING_SOURCES = ("tensor.py", "attention.py", "encoder.py", "decoder.py", "model.py", "training.py")


def _code_digest() -> str:
    h = hashlib.sha256()
    for name in _TRAINING_SOURCES:
        h.update((Path(__file__).parent / name).read_bytes())
    return h.hexdigest()


def read_sweep_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["token_error"] = float(r["token_error"]) if r["token_error"] else float("nan")
        if r["seed"] != "mean":
            r["seed"] = int(r["seed"])
    return rows


def trend_sweep(root: str | os.PathLike, seeds: Sequence[int] = (0, 1, 2), epochs: int = 30,
                splits: Sequence[str] = TREND_SPLITS, jobs: int = 1,
                reuse: bool = True) -> tuple[list[dict], Path]:
    """Toy layer-split sweep under ``root/trend-<key>``.

    ``key`` hashes the resolved config, the cell grid and the training code, so
    a finished sweep is reused only when rerunning it would reproduce it.
    """
    cfg = toy_config(splits[0], epochs=epochs)
    payload = json.dumps([config_mod.to_dict(cfg), list(splits), list(seeds), _code_digest()])
    out = Path(root) / f"trend-{hashlib.sha256(payload.encode()).hexdigest()[:12]}"
    if not (reuse and (out / "sweep.csv").exists()):
        sweep(cfg, splits, seeds, out, jobs)
    return read_sweep_csv(out / "sweep.csv"), out


def load_run(run_dir: str | os.PathLike) -> tuple[Model, ExperimentConfig]:
    run_dir = Path(run_dir)
    cfg = config_mod.load_config(run_dir / "config.json")
    model = Model.init(cfg.model, cfg.train.seed)
    model.load_state(load_checkpoint(run_dir / "final.ckpt"))
    return model, cfg


def tiny_gradcheck_problem(seed: int = 0) -> tuple[Model, Batch, TokenVocab]:
    """d_att=8, d_ff=16, h=2, one SA + one FF encoder layer, one decoder layer, vocab 6, T=11."""
    enc = EncoderConfig(layer_kinds=[LayerKind.SA, LayerKind.FF], d_att=8, d_ff=16, h=2, dropout=0.0,
                        input_dim=8, subsample=SubsampleSpec(channels=4))
    model = Model.init(ModelConfig(enc, decoder_layers=1, vocab_size=6), seed)
    rng = np.random.default_rng(seed)
    batch = Batch.from_utterances([Utterance(rng.normal(size=(11, 8)), (4, 5)),
                                   Utterance(rng.normal(size=(9, 8)), (5,))])
    return model, batch, TokenVocab.synthetic(2)
