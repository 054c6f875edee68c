"""Binary checkpoint and attention-dump formats, plus an external feature reader.

Checkpoint layout (all little-endian)::

    b"HSAN0001" | u32 count | count x (u16 name_len | name utf-8 | u8 rank |
                                        rank x u64 dims | prod(dims) x f64)

Attention dump layout::

    b"ATTN0001" | u32 utterances | per utterance: u32 layers |
        per layer: u32 heads | per head: u32 n | n*n x f64
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

CKPT_MAGIC = b"HSAN0001"
ATTN_MAGIC = b"ATTN0001"


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of file")
    return buf


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 8) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
            n = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").reshape(dims).copy()
    return out


def save_attention_dump(path: str | os.PathLike, utterances: list[list[list[np.ndarray]]]) -> None:
    """``utterances[u][layer][head]`` is an n x n attention matrix."""
    with open(path, "wb") as f:
        f.write(ATTN_MAGIC)
        f.write(struct.pack("<I", len(utterances)))
        for layers in utterances:
            f.write(struct.pack("<I", len(layers)))
            for heads in layers:
                f.write(struct.pack("<I", len(heads)))
                for m in heads:
                    m = np.asarray(m, dtype="<f8")
                    if m.ndim != 2 or m.shape[0] != m.shape[1]:
                        raise FormatError(f"attention matrix must be square, got {m.shape}")
                    f.write(struct.pack("<I", m.shape[0]))
                    f.write(np.ascontiguousarray(m).tobytes())


def load_attention_dump(path: str | os.PathLike) -> list[list[list[np.ndarray]]]:
    with open(path, "rb") as f:
        if _read_exact(f, 8) != ATTN_MAGIC:
            raise FormatError(f"{path}: not an attention dump (bad magic)")
        (n_utt,) = struct.unpack("<I", _read_exact(f, 4))
        utts = []
        for _ in range(n_utt):
            (n_layers,) = struct.unpack("<I", _read_exact(f, 4))
            layers = []
            for _ in range(n_layers):
                (n_heads,) = struct.unpack("<I", _read_exact(f, 4))
                heads = []
                for _ in range(n_heads):
                    (n,) = struct.unpack("<I", _read_exact(f, 4))
                    heads.append(np.frombuffer(_read_exact(f, 8 * n * n), dtype="<f8")
                                 .reshape(n, n).copy())
                layers.append(heads)
            utts.append(layers)
    return utts


def write_feature_dir(path: str | os.PathLike, utts) -> None:
    """One ``<id>.npy`` float64 (T, F) matrix per utterance and a ``text`` file of token ids."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, u in enumerate(utts):
        uid = f"utt{i:06d}"
        np.save(path / f"{uid}.npy", np.asarray(u.features, dtype=np.float64))
        lines.append(" ".join([uid, *map(str, u.target)]))
    (path / "text").write_text("\n".join(lines) + "\n")


def read_feature_dir(path: str | os.PathLike):
    from .model import Utterance

    path = Path(path)
    text = path / "text"
    if not text.exists():
        raise FileNotFoundError(f"{text} missing")
    utts = []
    for line in text.read_text().splitlines():
        if not line.strip():
            continue
        uid, *ids = line.split()
        feats = np.load(path / f"{uid}.npy")
        if feats.ndim != 2:
            raise FormatError(f"{uid}: features must be a (T, F) matrix")
        utts.append(Utterance(feats.astype(np.float64), tuple(int(i) for i in ids)))
    return utts
