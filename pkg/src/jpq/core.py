"""Shared numeric helpers, dataset containers, and the "emb" matrix file format."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

EMB_MAGIC = b"JPQE"
EMB_VERSION = 1


class InvalidArgumentError(ValueError):
    """Raised when an operation receives arguments that violate its preconditions."""


class CorruptIndexError(ValueError):
    """Raised when a binary artifact or code row is malformed.

    ``offset`` is the byte offset where decoding failed, or ``None`` when the
    problem is not tied to a file position.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def make_rng(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.default_rng(np.random.SeedSequence(seed))


def as_embedding(values, dim: int | None = None, dtype=None) -> np.ndarray:
    """Validate a 1-D embedding vector, optionally checking its dimension."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"embedding must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InvalidArgumentError(f"embedding has dimension {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("embedding contains non-finite values")
    return arr


def inner_product(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise InvalidArgumentError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)))


def split_subvectors(e, M: int) -> list[np.ndarray]:
    """Split ``e`` into ``M`` contiguous, equally sized sub-vectors."""
    e = np.asarray(e)
    if e.ndim != 1:
        raise InvalidArgumentError(f"expected a 1-D vector, got shape {e.shape}")
    if M <= 0 or e.shape[0] % M != 0:
        raise InvalidArgumentError(f"dimension {e.shape[0]} is not divisible by M={M}")
    sub = e.shape[0] // M
    return [e[i * sub:(i + 1) * sub] for i in range(M)]


@dataclass(frozen=True)
class Corpus:
    doc_ids: tuple[str, ...]
    embeddings: np.ndarray | None = None
    features: np.ndarray | None = None
    _row: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(self.doc_ids)
        object.__setattr__(self, "doc_ids", ids)
        if len(ids) == 0:
            raise InvalidArgumentError("corpus must contain at least one document")
        row = {d: i for i, d in enumerate(ids)}
        if len(row) != len(ids):
            raise InvalidArgumentError("document ids must be unique")
        object.__setattr__(self, "_row", row)
        for name in ("embeddings", "features"):
            mat = getattr(self, name)
            if mat is None:
                continue
            mat = np.asarray(mat)
            if mat.ndim != 2 or mat.shape[0] != len(ids):
                raise InvalidArgumentError(
                    f"{name} must have shape ({len(ids)}, ·), got {mat.shape}")
            mat.setflags(write=False)
            object.__setattr__(self, name, mat)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def row(self, doc_id: str) -> int:
        try:
            return self._row[doc_id]
        except KeyError:
            raise InvalidArgumentError(f"unknown document id {doc_id!r}") from None

    def rows(self, doc_ids: Iterable[str]) -> np.ndarray:
        return np.array([self.row(d) for d in doc_ids], dtype=np.int64)


class RelevanceLabels(Mapping[str, frozenset]):
    """Binary relevance judgments: query id -> set of relevant doc ids."""

    def __init__(self, labels: Mapping[str, Iterable[str]], corpus: Corpus | None = None):
        self._labels = {q: frozenset(ds) for q, ds in labels.items()}
        for q, ds in self._labels.items():
            if not ds:
                raise InvalidArgumentError(f"query {q!r} has no relevant documents")
            if corpus is not None:
                for d in ds:
                    if d not in corpus._row:
                        raise InvalidArgumentError(
                            f"query {q!r} references unknown document {d!r}")

    def __getitem__(self, query_id: str) -> frozenset:
        return self._labels[query_id]

    def __iter__(self):
        return iter(self._labels)

    def __len__(self) -> int:
        return len(self._labels)

    def __repr__(self) -> str:
        return f"RelevanceLabels({len(self)} queries)"


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --- id block shared by the "emb" and "jpq" formats ------------------------

def pack_ids(ids: Sequence[str]) -> bytes:
    parts = []
    for doc_id in ids:
        raw = doc_id.encode("utf-8")
        if b"\n" in raw:
            raise InvalidArgumentError(f"id {doc_id!r} contains a newline")
        if len(raw) > 0xFFFF:
            raise InvalidArgumentError(f"id {doc_id[:20]!r}... longer than 65535 bytes")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptIndexError(
                f"truncated {self.what}: need {n} bytes, {len(self.buf) - self.pos} left",
                self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def ids(self, count: int) -> list[str]:
        out = []
        for _ in range(count):
            (n,) = self.unpack("<H")
            start = self.pos
            raw = self.take(n)
            try:
                out.append(raw.decode("utf-8"))
            except UnicodeDecodeError:
                raise CorruptIndexError(f"invalid UTF-8 id in {self.what}", start) from None
        return out

    def expect_end(self):
        if self.pos != len(self.buf):
            raise CorruptIndexError(
                f"{len(self.buf) - self.pos} trailing bytes in {self.what}", self.pos)


def encode_emb(ids: Sequence[str], matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise InvalidArgumentError(
            f"matrix shape {matrix.shape} does not match {len(ids)} ids")
    header = EMB_MAGIC + struct.pack("<III", EMB_VERSION, matrix.shape[0], matrix.shape[1])
    body = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    return header + body + pack_ids(ids)


def decode_emb(buf: bytes) -> tuple[list[str], np.ndarray]:
    r = _Reader(buf, "embedding file")
    if r.take(4) != EMB_MAGIC:
        raise CorruptIndexError("bad magic in embedding file", 0)
    version, count, dim = r.unpack("<III")
    if version != EMB_VERSION:
        raise CorruptIndexError(f"unsupported embedding file version {version}", 4)
    matrix = r.array("<f4", count * dim).astype(np.float32).reshape(count, dim)
    ids = r.ids(count)
    r.expect_end()
    return ids, matrix


def write_emb(path, ids: Sequence[str], matrix: np.ndarray) -> None:
    atomic_write_bytes(path, encode_emb(ids, matrix))


def read_emb(path) -> tuple[list[str], np.ndarray]:
    return decode_emb(Path(path).read_bytes())


# --- flat key=value config files -------------------------------------------

def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InvalidArgumentError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def coerce_fields(cls, values: Mapping[str, str], strict: bool = True) -> dict:
    """Convert string values to the annotated types of dataclass ``cls``."""
    import dataclasses
    import typing

    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    out = {}
    for key, raw in values.items():
        if key not in names:
            if strict:
                raise InvalidArgumentError(f"unknown {cls.__name__} key {key!r}")
            continue
        typ = hints[key]
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if args and typing.get_origin(typ) is not tuple:
            typ = args[0]
        try:
            if typ is bool:
                if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(raw)
                out[key] = raw.lower() in ("1", "true", "yes")
            elif typ in (int, float, str):
                out[key] = typ(float(raw)) if typ is int and "e" in raw.lower() else typ(raw)
            elif typing.get_origin(typ) is tuple:
                out[key] = tuple(int(x) for x in raw.split(",") if x.strip())
            else:
                out[key] = raw
        except ValueError:
            raise InvalidArgumentError(f"bad value for {key}: {raw!r}") from None
    return out
