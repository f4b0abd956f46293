"""MFB1 feature files: precomputed (rows x cols) float32 matrices plus a label file.

Layout, all little-endian: magic ``MFB1``, u32 record count, then per record
u32 rows, u32 cols and rows*cols float32 values in row-major order. Labels
live in a text file with one integer class per line.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .synthetic import Dataset

MAGIC = b"MFB1"
_U32 = struct.Struct("<I")


class FeatureFileError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset


def write_features(path, matrices: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(len(matrices)))
        for m in matrices:
            m = np.asarray(m)
            if m.ndim != 2:
                raise ValueError(f"feature matrices must be 2-D, got shape {m.shape}")
            fh.write(_U32.pack(m.shape[0]))
            fh.write(_U32.pack(m.shape[1]))
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def write_labels(path, labels: Sequence[int]) -> None:
    Path(path).write_text("".join(f"{int(y)}\n" for y in labels))


def read_features(path) -> list[np.ndarray]:
    """Parse an MFB1 file into a list of float32 matrices."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FeatureFileError("bad magic (expected b'MFB1')", 0)
    pos = 4

    def u32(what: str) -> int:
        nonlocal pos
        if pos + 4 > len(buf):
            raise FeatureFileError(f"truncated file while reading {what}", pos)
        (v,) = _U32.unpack_from(buf, pos)
        pos += 4
        return v

    count = u32("record count")
    out = []
    for i in range(count):
        rows = u32(f"rows of record {i}")
        cols = u32(f"cols of record {i}")
        nbytes = 4 * rows * cols
        if pos + nbytes > len(buf):
            raise FeatureFileError(f"truncated file in values of record {i}", pos)
        out.append(np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).copy())
        pos += nbytes
    if pos != len(buf):
        raise FeatureFileError(f"{len(buf) - pos} trailing bytes after {count} records", pos)
    return out


def read_labels(path) -> np.ndarray:
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            labels.append(int(line))
        except ValueError:
            raise FeatureFileError(f"{path}: line {lineno}: not an integer label: {line!r}") from None
    return np.array(labels, dtype=np.int64)


def fit_length(m: np.ndarray, seq_len: int) -> np.ndarray:
    """Zero-pad at the end or truncate to exactly ``seq_len`` rows."""
    if len(m) >= seq_len:
        return m[:seq_len]
    pad = np.zeros((seq_len - len(m), m.shape[1]), dtype=m.dtype)
    return np.concatenate([m, pad])


def load_features(path, labels_path, seq_len: int, *, n_classes: int | None = None, eval_frac: float = 0.2,
                  seed: int = 0) -> Dataset:
    """Load an MFB1 file and its labels into a stratified train/eval Dataset."""
    mats = read_features(path)
    labels = read_labels(labels_path)
    if len(mats) != len(labels):
        raise FeatureFileError(f"label/feature count mismatch: {len(mats)} feature records, {len(labels)} labels")
    if not mats:
        raise FeatureFileError("feature file holds no records")
    cols = {m.shape[1] for m in mats}
    if len(cols) != 1:
        raise FeatureFileError(f"records disagree on feature width: {sorted(cols)}")
    if labels.min() < 0:
        raise FeatureFileError("labels must be non-negative")
    x = np.stack([fit_length(m, seq_len) for m in mats]).astype(np.float64)
    K = int(labels.max()) + 1 if n_classes is None else n_classes
    if labels.max() >= K:
        raise FeatureFileError(f"label {int(labels.max())} out of range for {K} classes")
    rng = np.random.default_rng(seed)
    train_idx, eval_idx = [], []
    for k in range(K):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_eval = int(round(len(idx) * eval_frac))
        eval_idx.extend(idx[:n_eval])
        train_idx.extend(idx[n_eval:])
    tr = np.sort(np.array(train_idx, dtype=np.int64))
    ev = np.sort(np.array(eval_idx, dtype=np.int64))
    return Dataset(x[tr], labels[tr], x[ev], labels[ev], K)
