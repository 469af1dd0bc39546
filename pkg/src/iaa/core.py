"""Embedding vectors, labeled datasets, distance primitives and dataset IO.

Two on-disk formats are supported:

* ``iaad``: little-endian binary dump. Header is the magic ``b"IAAD"``,
  ``u32`` version (1), ``u64`` N, ``u32`` D, followed by N*D ``f32`` values in
  row-major order and N ``u32`` labels.
* ``csv``: one row per sample, D real columns then an integer label column.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"IAAD"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def _as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    return v


def euclidean_distance(a, b) -> float:
    a, b = _as_vector(a), _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def cosine_similarity(a, b) -> float:
    a, b = _as_vector(a), _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l2_normalize(a) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    x = np.asarray(a, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero-norm vector")
    return x / norm


@dataclass(frozen=True)
class ClassIndex:
    """Partition of sample indices by class.

    ``classes`` lists the original class ids in order of first appearance;
    ``members[c]`` holds the ascending sample indices of ``classes[c]``.
    """

    classes: tuple
    members: tuple
    dense: np.ndarray = field(repr=False)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def position(self, class_id) -> int:
        return self.classes.index(class_id)

    def indices(self, class_id) -> np.ndarray:
        return self.members[self.position(class_id)]


def build_class_index(labels) -> ClassIndex:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    uniq, first, dense = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    dense = remap[dense.ravel()]
    members = tuple(np.flatnonzero(dense == c) for c in range(order.size))
    classes = tuple(uniq[order].tolist())
    dense.setflags(write=False)
    return ClassIndex(classes=classes, members=members, dense=dense)


@dataclass(frozen=True)
class Dataset:
    embeddings: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        lab = np.array(self.labels, dtype=np.int64)
        if emb.ndim != 2 or emb.shape[0] == 0 or emb.shape[1] == 0:
            raise DataError(f"embeddings must be a non-empty N x D matrix, got {emb.shape}")
        if lab.shape != (emb.shape[0],):
            raise DataError(
                f"label count {lab.size} does not match embedding rows {emb.shape[0]}"
            )
        if not np.all(np.isfinite(emb)):
            raise DataError("embeddings contain non-finite values")
        if np.any(lab < 0):
            raise DataError("class ids must be non-negative integers")
        emb.setflags(write=False)
        lab.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def class_index(self) -> ClassIndex:
        return build_class_index(self.labels)

    def subset(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.embeddings[idx], self.labels[idx], name or self.name)


def _guess_format(path: Path, fmt):
    if fmt is not None:
        fmt = fmt.lower()
        if fmt not in ("iaad", "csv"):
            raise DataError(f"unsupported format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "iaad"


def encode_iaad(dataset: Dataset) -> bytes:
    if np.any(dataset.labels > np.iinfo(np.uint32).max):
        raise DataError("class ids do not fit in u32")
    n, d = dataset.embeddings.shape
    body = dataset.embeddings.astype("<f4")
    if not np.all(np.isfinite(body)):
        raise DataError("embeddings overflow 32-bit float storage")
    return (
        _HEADER.pack(MAGIC, VERSION, n, d)
        + body.tobytes(order="C")
        + dataset.labels.astype("<u4").tobytes()
    )


def decode_iaad(buf: bytes, name: str = "") -> Dataset:
    if len(buf) < _HEADER.size:
        raise DataError("truncated file: header incomplete")
    magic, version, n, d = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"unsupported version {version}")
    if n == 0 or d == 0:
        raise DataError(f"empty dataset (N={n}, D={d})")
    expected = _HEADER.size + 4 * n * d + 4 * n
    if len(buf) < expected:
        raise DataError(f"truncated file: expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise DataError(f"trailing data: expected {expected} bytes, got {len(buf)}")
    emb = np.frombuffer(buf, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=_HEADER.size + 4 * n * d)
    if not np.all(np.isfinite(emb)):
        raise DataError("file contains non-finite values")
    return Dataset(emb.astype(np.float64), labels.astype(np.int64), name)


def encode_csv(dataset: Dataset) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    for row, label in zip(dataset.embeddings, dataset.labels):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return out.getvalue()


def decode_csv(text: str, name: str = "", header: bool = False, dim: int | None = None) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if header:
        rows = rows[1:]
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError("CSV contains no samples")
    width = len(rows[0])
    if width < 2:
        raise DataError("CSV rows need at least one value column and a label column")
    if dim is not None and width != dim + 1:
        raise DataError(f"dimension mismatch: expected {dim} value columns, got {width - 1}")
    emb, labels = [], []
    for lineno, r in enumerate(rows, start=2 if header else 1):
        if len(r) != width:
            raise DataError(f"line {lineno}: expected {width} columns, got {len(r)}")
        try:
            emb.append([float(c) for c in r[:-1]])
            labels.append(int(r[-1]))
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    emb = np.array(emb, dtype=np.float64)
    if not np.all(np.isfinite(emb)):
        raise DataError("CSV contains non-finite values")
    return Dataset(emb, labels, name)


def load_dataset(path, format=None, header=False) -> Dataset:
    path = Path(path)
    fmt = _guess_format(path, format)
    try:
        if fmt == "csv":
            return decode_csv(path.read_text(), name=path.stem, header=header)
        return decode_iaad(path.read_bytes(), name=path.stem)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None


def save_dataset(dataset: Dataset, path, format=None) -> None:
    path = Path(path)
    fmt = _guess_format(path, format)
    if fmt == "csv":
        path.write_text(encode_csv(dataset))
    else:
        path.write_bytes(encode_iaad(dataset))
