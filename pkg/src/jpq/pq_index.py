"""Product quantization: codebook learning, encoding, ADC search and the "jpq" index file."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .core import (
    CorruptIndexError,
    InvalidArgumentError,
    _Reader,
    atomic_write_bytes,
    pack_ids,
)

log = logging.getLogger(__name__)

INDEX_MAGIC = b"JPQI"
INDEX_VERSION = 1
MAX_K = 256
_CHUNK = 8192


@dataclass(frozen=True, eq=False)
class Codebook:
    """``M`` sets of ``K`` centroids of width ``D/M``, plus an optional DxD rotation.

    Documents and queries are rotated into the codebook space before use; the
    reconstructions live in that rotated space.
    """

    centroids: np.ndarray
    rotation: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.centroids)
        if c.ndim != 3:
            raise InvalidArgumentError(f"centroids must be (M, K, sub_dim), got {c.shape}")
        if not 1 <= c.shape[1] <= MAX_K:
            raise InvalidArgumentError(f"K must be in [1, {MAX_K}], got {c.shape[1]}")
        if not np.all(np.isfinite(c)):
            raise InvalidArgumentError("centroids contain non-finite values")
        object.__setattr__(self, "centroids", c)
        if self.rotation is not None:
            r = np.asarray(self.rotation)
            D = c.shape[0] * c.shape[2]
            if r.shape != (D, D):
                raise InvalidArgumentError(f"rotation must be ({D}, {D}), got {r.shape}")
            r64 = r.astype(np.float64)
            dev = np.max(np.abs(r64.T @ r64 - np.eye(D)))
            if dev >= 1e-5:
                raise InvalidArgumentError(f"rotation is not orthonormal (max |RtR - I| = {dev:.2e})")
            object.__setattr__(self, "rotation", r)

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def D(self) -> int:
        return self.M * self.sub_dim

    @cached_property
    def rotation64(self) -> np.ndarray | None:
        return None if self.rotation is None else self.rotation.astype(np.float64)

    @cached_property
    def centroids64(self) -> np.ndarray:
        return self.centroids.astype(np.float64)

    def rotate(self, x: np.ndarray) -> np.ndarray:
        """Map vectors (1-D or row-stacked) into the codebook space."""
        x = np.asarray(x)
        if x.shape[-1] != self.D:
            raise InvalidArgumentError(f"expected dimension {self.D}, got {x.shape[-1]}")
        if self.rotation is None:
            return x
        if x.dtype == np.float64:
            return x @ self.rotation64.T
        return x @ self.rotation.T.astype(x.dtype, copy=False)

    def with_centroids(self, centroids: np.ndarray) -> "Codebook":
        return Codebook(centroids, self.rotation)

    def astype(self, dtype) -> "Codebook":
        rot = None if self.rotation is None else self.rotation.astype(dtype)
        return Codebook(self.centroids.astype(dtype), rot)


@dataclass(frozen=True, eq=False)
class CodeMatrix:
    codes: np.ndarray
    doc_ids: tuple[str, ...]

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2 or codes.dtype != np.uint8:
            raise InvalidArgumentError(f"codes must be a 2-D uint8 array, got {codes.dtype} {codes.shape}")
        ids = tuple(self.doc_ids)
        if len(ids) != codes.shape[0]:
            raise InvalidArgumentError(f"{len(ids)} ids for {codes.shape[0]} code rows")
        codes = np.ascontiguousarray(codes)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "doc_ids", ids)

    def __len__(self) -> int:
        return self.codes.shape[0]

    @property
    def M(self) -> int:
        return self.codes.shape[1]

    def check(self, K: int) -> None:
        if self.codes.size and int(self.codes.max()) >= K:
            raise CorruptIndexError(f"code value {int(self.codes.max())} out of range for K={K}")


@dataclass(frozen=True, eq=False)
class LookupTable:
    tau: np.ndarray  # (M, K) inner products of query sub-vectors with centroids


@dataclass(frozen=True)
class SearchResult:
    doc_ids: tuple[str, ...]
    scores: tuple[float, ...]
    rows: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __iter__(self):
        return iter(zip(self.doc_ids, self.scores))


# --- k-means -----------------------------------------------------------------

def _assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row (ties -> smallest index) and squared distance."""
    N = X.shape[0]
    codes = np.empty(N, dtype=np.int64)
    dists = np.empty(N, dtype=np.float64)
    c_sq = np.einsum("kd,kd->k", C, C)
    for start in range(0, N, _CHUNK):
        xb = X[start:start + _CHUNK]
        d = c_sq[None, :] - 2.0 * (xb @ C.T)
        idx = np.argmin(d, axis=1)
        codes[start:start + len(xb)] = idx
        x_sq = np.einsum("nd,nd->n", xb, xb)
        dists[start:start + len(xb)] = np.maximum(d[np.arange(len(xb)), idx] + x_sq, 0.0)
    return codes, dists


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    N = X.shape[0]
    centers = np.empty((K, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(N))
    centers[0] = X[first]
    closest = np.einsum("nd,nd->n", X - centers[0], X - centers[0])
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            u = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), u, side="right"))
            idx = min(idx, N - 1)
        else:
            # every point already coincides with a center
            idx = int(rng.integers(N))
        centers[k] = X[idx]
        diff = X - centers[k]
        np.minimum(closest, np.einsum("nd,nd->n", diff, diff), out=closest)
    return centers


def _lloyd(X: np.ndarray, C: np.ndarray, iters: int) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Run ``iters`` Lloyd steps from ``C``.

    Returns centroids, final codes, and the mean squared error after the
    initial assignment and after every step (length ``iters + 1``).
    """
    C = C.copy()
    K = C.shape[0]
    codes, dists = _assign(X, C)
    history = [float(dists.mean())]
    for _ in range(iters):
        counts = np.bincount(codes, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, codes, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # residual w.r.t. each point's updated centroid
            diff = X - C[codes]
            err = np.einsum("nd,nd->n", diff, diff)
            for k in empty:
                far = int(np.argmax(err))
                C[k] = X[far]
                err[far] = -1.0
        codes, dists = _assign(X, C)
        history.append(float(dists.mean()))
    return C, codes, history


def _subspace_rngs(seed: int, M: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(M)]


def _check_train_args(embeddings: np.ndarray, M: int, K: int) -> np.ndarray:
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgumentError(f"embeddings must be 2-D, got shape {X.shape}")
    N, D = X.shape
    if M <= 0 or D % M != 0:
        raise InvalidArgumentError(f"dimension {D} is not divisible by M={M}")
    if not 1 <= K <= MAX_K:
        raise InvalidArgumentError(f"K must be in [1, {MAX_K}], got {K}")
    if N < K:
        raise InvalidArgumentError(f"need at least K={K} embeddings, got {N}")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("embeddings contain non-finite values")
    return X


def _kmeans_all(X: np.ndarray, M: int, K: int, iters: int, seed: int,
                init: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, list[float]]:
    N, D = X.shape
    sub = D // M
    centroids = np.empty((M, K, sub), dtype=np.float64)
    codes = np.empty((N, M), dtype=np.int64)
    total = np.zeros(iters + 1)
    rngs = _subspace_rngs(seed, M) if init is None else [None] * M
    for i in range(M):
        Xi = np.ascontiguousarray(X[:, i * sub:(i + 1) * sub])
        C0 = _kmeans_pp(Xi, K, rngs[i]) if init is None else init[i]
        centroids[i], codes[:, i], hist = _lloyd(Xi, C0, iters)
        total += hist
    return centroids, codes, [float(v) for v in total]


def train_kmeans_codebook(embeddings, M: int, K: int, iters: int = 25, seed: int = 0,
                          trace: list | None = None) -> Codebook:
    """Learn a plain PQ codebook by per-sub-space k-means (k-means++ seeding).

    If ``trace`` is given, the mean reconstruction error (summed over
    sub-spaces) after the initial assignment and after each Lloyd step is
    appended to it.
    """
    if iters < 0:
        raise InvalidArgumentError(f"iters must be non-negative, got {iters}")
    X = _check_train_args(embeddings, M, K)
    centroids, _, hist = _kmeans_all(X, M, K, iters, seed)
    if trace is not None:
        trace.extend(hist)
    return Codebook(centroids.astype(np.float32))


def _eigen_allocation(X: np.ndarray, M: int) -> np.ndarray:
    """PCA rotation whose output dims are grouped so that sub-spaces get balanced variance."""
    D = X.shape[1]
    sub = D // M
    cov = np.cov(X, rowvar=False, bias=True).reshape(D, D)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals = np.maximum(vals[order], 1e-12)
    vecs = vecs[:, order]
    buckets: list[list[int]] = [[] for _ in range(M)]
    log_prod = np.zeros(M)
    for j in range(D):
        open_b = [b for b in range(M) if len(buckets[b]) < sub]
        b = min(open_b, key=lambda b: (log_prod[b], b))
        buckets[b].append(j)
        log_prod[b] += np.log(vals[j])
    rows = [vecs[:, j] for b in buckets for j in b]
    return np.array(rows)


def _procrustes(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Orthonormal R minimizing sum ||R x_n - y_n||^2."""
    U, _, Vt = np.linalg.svd(Y.T @ X)
    return U @ Vt


def _reconstruct_rows(centroids: np.ndarray, codes: np.ndarray) -> np.ndarray:
    M = centroids.shape[0]
    return np.concatenate([centroids[i][codes[:, i]] for i in range(M)], axis=1)


def train_opq_rotation(embeddings, M: int, K: int, outer_iters: int = 10, seed: int = 0,
                       kmeans_iters: int = 25, inner_iters: int = 4,
                       trace: list | None = None) -> Codebook:
    """Learn an orthonormal rotation and PQ codebook by alternating optimization.

    The rotation starts from whichever of the identity and a variance-balanced
    PCA rotation gives the lower k-means error. Each outer iteration then runs
    warm-started Lloyd steps on the rotated data and solves the orthogonal
    Procrustes problem for the rotation with codes and centroids fixed.
    ``trace`` receives the total reconstruction error ``||R d - d_hat||^2``
    (mean over docs) after each outer iteration.
    """
    if outer_iters < 1:
        raise InvalidArgumentError(f"outer_iters must be >= 1, got {outer_iters}")
    X = _check_train_args(embeddings, M, K)
    D = X.shape[1]

    best = None
    for R0 in (np.eye(D), _eigen_allocation(X, M)):
        C, codes, hist = _kmeans_all(X @ R0.T, M, K, kmeans_iters, seed)
        if best is None or hist[-1] < best[3]:
            best = (R0, C, codes, hist[-1])
    R, C, codes, _ = best

    for it in range(outer_iters):
        if it > 0:
            C, codes, _ = _kmeans_all(X @ R.T, M, K, inner_iters, seed, init=C)
        R = _procrustes(X, _reconstruct_rows(C, codes))
        # reassign with the new rotation; cannot increase the error
        C, codes, hist = _kmeans_all(X @ R.T, M, K, 0, seed, init=C)
        log.debug("opq outer iteration %d: error %.6g", it, hist[0])
        if trace is not None:
            trace.append(hist[0])

    return Codebook(C.astype(np.float32), R.astype(np.float32))


# --- encoding / reconstruction --------------------------------------------

def quantize_corpus(cb: Codebook, embeddings, doc_ids: Sequence[str] | None = None,
                    return_errors: bool = False):
    """Assign each (rotated) embedding to its nearest centroid in every sub-space.

    With ``return_errors`` the per-document squared reconstruction errors
    ``sum_i ||(R d)_i - c_{i, code_i}||^2`` are returned alongside the codes.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cb.D:
        raise InvalidArgumentError(f"embeddings must be (N, {cb.D}), got {X.shape}")
    if doc_ids is None:
        doc_ids = [str(i) for i in range(X.shape[0])]
    Xr = cb.rotate(X)
    C = cb.centroids64
    codes = np.empty((X.shape[0], cb.M), dtype=np.uint8)
    errors = np.zeros(X.shape[0])
    s = cb.sub_dim
    for i in range(cb.M):
        c, d = _assign(np.ascontiguousarray(Xr[:, i * s:(i + 1) * s]), C[i])
        codes[:, i] = c
        errors += d
    cm = CodeMatrix(codes, tuple(doc_ids))
    return (cm, errors) if return_errors else cm


def reconstruction_error(cb: Codebook, embeddings, codes: CodeMatrix) -> float:
    X = cb.rotate(np.asarray(embeddings, dtype=np.float64))
    diff = X - reconstruct_all(cb, codes).astype(np.float64)
    return float(np.einsum("nd,nd->n", diff, diff).mean())


def _check_code_row(cb: Codebook, codes) -> np.ndarray:
    row = np.asarray(codes)
    if row.shape != (cb.M,):
        raise InvalidArgumentError(f"code row must have length {cb.M}, got shape {row.shape}")
    if np.any(row < 0) or np.any(row >= cb.K):
        raise CorruptIndexError(f"code row {row.tolist()} has values outside [0, {cb.K})")
    return row.astype(np.int64)


def reconstruct(cb: Codebook, codes) -> np.ndarray:
    """Concatenate the selected centroids (in the rotated space)."""
    row = _check_code_row(cb, codes)
    return cb.centroids[np.arange(cb.M), row].reshape(cb.D)


def reconstruct_all(cb: Codebook, codes: CodeMatrix) -> np.ndarray:
    codes.check(cb.K)
    return _reconstruct_rows(cb.centroids, codes.codes)


# --- ADC search --------------------------------------------------------------

def build_lookup_table(cb: Codebook, q) -> LookupTable:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != cb.D:
        raise InvalidArgumentError(f"query must have dimension {cb.D}, got shape {q.shape}")
    qr = cb.rotate(q)
    sub = qr.reshape(cb.M, cb.sub_dim)
    tau = np.einsum("mkd,md->mk", cb.centroids64, sub)
    return LookupTable(tau)


def adc_score(table: LookupTable, codes) -> float:
    row = np.asarray(codes, dtype=np.int64)
    M, K = table.tau.shape
    if row.shape != (M,):
        raise InvalidArgumentError(f"code row must have length {M}, got shape {row.shape}")
    if np.any(row < 0) or np.any(row >= K):
        raise CorruptIndexError(f"code row {row.tolist()} has values outside [0, {K})")
    return float(table.tau[np.arange(M), row].sum())


@numba.njit(cache=True, nogil=True)
def _adc_scores_kernel(tau, codes):
    N, M = codes.shape
    out = np.empty(N, dtype=np.float64)
    for r in range(N):
        s = 0.0
        for i in range(M):
            s += tau[i, codes[r, i]]
        out[r] = s
    return out


@numba.njit(cache=True, nogil=True)
def _sift_down(hs, hr, size, pos):
    # min-heap on (score asc, row desc): root is the current worst kept doc
    while True:
        left = 2 * pos + 1
        if left >= size:
            return
        worst = left
        right = left + 1
        if right < size:
            if hs[right] < hs[left] or (hs[right] == hs[left] and hr[right] > hr[left]):
                worst = right
        if hs[worst] < hs[pos] or (hs[worst] == hs[pos] and hr[worst] > hr[pos]):
            hs[pos], hs[worst] = hs[worst], hs[pos]
            hr[pos], hr[worst] = hr[worst], hr[pos]
            pos = worst
        else:
            return


@numba.njit(cache=True, nogil=True)
def _adc_topk_kernel(tau, codes, n):
    N, M = codes.shape
    hs = np.empty(n, dtype=np.float64)
    hr = np.empty(n, dtype=np.int64)
    size = 0
    for r in range(N):
        s = 0.0
        for i in range(M):
            s += tau[i, codes[r, i]]
        if size < n:
            # sift up
            pos = size
            hs[pos] = s
            hr[pos] = r
            size += 1
            while pos > 0:
                parent = (pos - 1) // 2
                if hs[pos] < hs[parent] or (hs[pos] == hs[parent] and hr[pos] > hr[parent]):
                    hs[pos], hs[parent] = hs[parent], hs[pos]
                    hr[pos], hr[parent] = hr[parent], hr[pos]
                    pos = parent
                else:
                    break
        elif s > hs[0]:
            # rows arrive in increasing order, so an equal score never displaces the root
            hs[0] = s
            hr[0] = r
            _sift_down(hs, hr, size, 0)
    # pop worst-first into the tail of the output
    out_s = np.empty(size, dtype=np.float64)
    out_r = np.empty(size, dtype=np.int64)
    for k in range(size - 1, -1, -1):
        out_s[k] = hs[0]
        out_r[k] = hr[0]
        last = k
        hs[0] = hs[last]
        hr[0] = hr[last]
        _sift_down(hs, hr, last, 0)
    return out_s, out_r


def adc_scores(table: LookupTable, codes: CodeMatrix) -> np.ndarray:
    """s-dagger for every document in ``codes``."""
    return _adc_scores_kernel(np.ascontiguousarray(table.tau), codes.codes)


def search_topk(cb: Codebook, codes: CodeMatrix, q, n: int) -> SearchResult:
    """Top-``n`` documents by ADC score; ties go to the smaller row index."""
    if len(codes) == 0:
        raise InvalidArgumentError("cannot search an empty index")
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    if codes.M != cb.M:
        raise InvalidArgumentError(f"index has M={codes.M}, codebook has M={cb.M}")
    table = build_lookup_table(cb, q)
    return search_table(table, codes, n)


def topk_rows(table: LookupTable, codes: CodeMatrix, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(rows, scores)`` of the top-``n`` documents, best first."""
    n = min(int(n), len(codes))
    scores, rows = _adc_topk_kernel(np.ascontiguousarray(table.tau), codes.codes, n)
    return rows, scores


def search_table(table: LookupTable, codes: CodeMatrix, n: int) -> SearchResult:
    rows, scores = topk_rows(table, codes, n)
    ids = codes.doc_ids
    return SearchResult(tuple(ids[r] for r in rows), tuple(scores.tolist()), tuple(rows.tolist()))


def search_topk_rows(cb: Codebook, codes: CodeMatrix, queries: np.ndarray, n: int) -> np.ndarray:
    """Row indices of the top-``n`` documents for each query in a batch."""
    queries = np.asarray(queries, dtype=np.float64)
    n = min(int(n), len(codes))
    out = np.empty((queries.shape[0], n), dtype=np.int64)
    for j, q in enumerate(queries):
        tau = build_lookup_table(cb, q).tau
        out[j] = _adc_topk_kernel(tau, codes.codes, n)[1]
    return out


# --- serialization -----------------------------------------------------------

def payload_bytes(cb: Codebook, codes: CodeMatrix) -> int:
    """Bytes of the centroid and code sections: 4*K*D + N*M."""
    return 4 * cb.K * cb.D + len(codes) * cb.M


def compression_ratio(D: int, M: int) -> float:
    """Raw f32 embedding bytes per doc over code bytes per doc."""
    return 4 * D / M


def encode_index(cb: Codebook, codes: CodeMatrix) -> bytes:
    if codes.M != cb.M:
        raise InvalidArgumentError(f"index has M={codes.M}, codebook has M={cb.M}")
    codes.check(cb.K)
    has_rot = cb.rotation is not None
    parts = [
        INDEX_MAGIC,
        struct.pack("<IIIIIB", INDEX_VERSION, cb.D, cb.M, cb.K, len(codes), int(has_rot)),
    ]
    if has_rot:
        parts.append(np.ascontiguousarray(cb.rotation, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())
    parts.append(codes.codes.tobytes())
    parts.append(pack_ids(codes.doc_ids))
    return b"".join(parts)


def decode_index(buf: bytes) -> tuple[Codebook, CodeMatrix]:
    r = _Reader(buf, "index file")
    if r.take(4) != INDEX_MAGIC:
        raise CorruptIndexError("bad magic in index file", 0)
    version, D, M, K, N, has_rot = r.unpack("<IIIIIB")
    if version != INDEX_VERSION:
        raise CorruptIndexError(f"unsupported index version {version}", 4)
    if M == 0 or D % M != 0 or not 1 <= K <= MAX_K or has_rot > 1:
        raise CorruptIndexError(f"inconsistent header D={D} M={M} K={K} rot={has_rot}", 8)
    rotation = r.array("<f4", D * D).astype(np.float32).reshape(D, D) if has_rot else None
    centroids = r.array("<f4", M * K * (D // M)).astype(np.float32).reshape(M, K, D // M)
    code_pos = r.pos
    codes = r.array(np.uint8, N * M).reshape(N, M)
    if codes.size and int(codes.max()) >= K:
        raise CorruptIndexError(f"code value {int(codes.max())} out of range for K={K}", code_pos)
    ids = r.ids(N)
    r.expect_end()
    try:
        cb = Codebook(centroids, rotation)
    except InvalidArgumentError as exc:
        raise CorruptIndexError(f"invalid codebook: {exc}", 25) from None
    return cb, CodeMatrix(codes, tuple(ids))


def serialize_index(cb: Codebook, codes: CodeMatrix, path) -> int:
    """Write the index atomically; returns the centroid+code payload size."""
    atomic_write_bytes(path, encode_index(cb, codes))
    return payload_bytes(cb, codes)


def deserialize_index(path) -> tuple[Codebook, CodeMatrix]:
    return decode_index(Path(path).read_bytes())
