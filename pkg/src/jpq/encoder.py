"""Small feed-forward dual-encoders with manual backprop and stage-1 pairwise training."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    Corpus,
    CorruptIndexError,
    InvalidArgumentError,
    RelevanceLabels,
    _Reader,
    atomic_write_bytes,
    make_rng,
)

log = logging.getLogger(__name__)

ENC_MAGIC = b"JPQF"
ENC_VERSION = 1
ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        w, b = np.asarray(self.weight), np.asarray(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise InvalidArgumentError(f"bad layer shapes: weight {w.shape}, bias {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class EncoderParams:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidArgumentError("encoder needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise InvalidArgumentError(
                    f"layer output {prev.weight.shape[0]} does not feed input {nxt.weight.shape[1]}")
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list: weight, bias for each layer."""
        return [a for layer in self.layers for a in (layer.weight, layer.bias)]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "EncoderParams":
        it = iter(arrays)
        return EncoderParams(tuple(Layer(next(it), next(it), layer.activation) for layer in self.layers))

    def astype(self, dtype) -> "EncoderParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def copy(self) -> "EncoderParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(eq=False)
class GradientBuffer:
    grads: list[np.ndarray]  # aligned with EncoderParams.arrays()

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "GradientBuffer":
        return cls([np.zeros_like(a) for a in params.arrays()])

    def add_(self, other: "GradientBuffer") -> "GradientBuffer":
        for g, o in zip(self.grads, other.grads):
            g += o
        return self


def init_encoder(in_dim: int, out_dim: int, hidden: Sequence[int] = (64,), seed: int = 0,
                 hidden_activation: str = "tanh", dtype=np.float32) -> EncoderParams:
    """Glorot-uniform weights, zero biases; identity activation on the output layer."""
    rng = make_rng(seed)
    dims = [in_dim, *hidden, out_dim]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        act = "identity" if k == len(dims) - 2 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out, dtype=dtype), act))
    return EncoderParams(tuple(layers))


def _forward(params: EncoderParams, X: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer, input first."""
    acts = [X]
    h = X
    for layer in params.layers:
        h = h @ layer.weight.T + layer.bias
        if layer.activation == "tanh":
            h = np.tanh(h)
        acts.append(h)
    return acts


def _check_features(params: EncoderParams, X) -> np.ndarray:
    X = np.asarray(X)
    if X.shape[-1] != params.in_dim:
        raise InvalidArgumentError(f"features have dimension {X.shape[-1]}, encoder expects {params.in_dim}")
    return X


def encode(params: EncoderParams, features) -> np.ndarray:
    """Embed one feature vector, or a row-stacked batch of them."""
    X = _check_features(params, features)
    if X.ndim not in (1, 2):
        raise InvalidArgumentError(f"features must be 1-D or 2-D, got shape {X.shape}")
    return _forward(params, X)[-1]


def encode_backward(params: EncoderParams, features, upstream_grad) -> GradientBuffer:
    """Gradient of ``sum(upstream_grad * encode(features))`` w.r.t. every parameter.

    Batched inputs are accepted; gradients are summed over rows.
    """
    X = _check_features(params, features)
    G = np.asarray(upstream_grad)
    if X.ndim == 1:
        X, G = X[None, :], G[None, :] if G.ndim == 1 else G
    if G.shape != (X.shape[0], params.out_dim):
        raise InvalidArgumentError(f"upstream gradient shape {G.shape} does not match output "
                                   f"({X.shape[0]}, {params.out_dim})")
    acts = _forward(params, X)
    grads: list[np.ndarray] = []
    delta = G
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        if layer.activation == "tanh":
            delta = delta * (1.0 - acts[k + 1] ** 2)
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ acts[k])
        delta = delta @ layer.weight
    grads.reverse()
    return GradientBuffer([g.astype(a.dtype, copy=False) for g, a in zip(grads, params.arrays())])


# --- stage-1 training --------------------------------------------------------

@dataclass(frozen=True)
class QuerySet:
    query_ids: tuple[str, ...]
    features: np.ndarray

    def __post_init__(self):
        ids = tuple(self.query_ids)
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] != len(ids):
            raise InvalidArgumentError(f"features {feats.shape} do not match {len(ids)} query ids")
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("query ids must be unique")
        object.__setattr__(self, "query_ids", ids)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.query_ids)

    def subset(self, ids: Sequence[str]) -> "QuerySet":
        pos = {q: i for i, q in enumerate(self.query_ids)}
        return QuerySet(tuple(ids), self.features[[pos[q] for q in ids]])


def logistic_pair_loss(s_pos: np.ndarray, s_neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``log(1 + exp(s_neg - s_pos))`` and its weight ``sigmoid(s_neg - s_pos)``."""
    z = np.asarray(s_neg) - np.asarray(s_pos)
    loss = np.logaddexp(0.0, z)
    alpha = 0.5 * (1.0 + np.tanh(0.5 * z))
    return loss, alpha


def _sgd_step(params: EncoderParams, grad: GradientBuffer, lr: float) -> EncoderParams:
    if lr == 0:
        return params
    return params.with_arrays([(a - lr * g).astype(a.dtype) for a, g in zip(params.arrays(), grad.grads)])


def train_dual_encoders(params_q: EncoderParams, params_d: EncoderParams, corpus: Corpus,
                        labels: RelevanceLabels, queries: QuerySet,
                        negative_source: str | Mapping[str, Sequence[str]] = "random",
                        epochs: int = 20, lr: float = 0.05, seed: int = 0,
                        batch_size: int = 32) -> tuple[EncoderParams, EncoderParams, list[float]]:
    """Stage-1 training of both towers on uncompressed inner-product scores.

    Every (query, relevant doc) pair is visited once per epoch with one
    negative: uniform over non-relevant docs for ``"random"``, or uniform over
    a per-query candidate list when a mapping is given. Returns the trained
    towers and the mean loss of each epoch.
    """
    if len(labels) == 0:
        raise InvalidArgumentError("relevance labels are empty")
    if epochs < 1:
        raise InvalidArgumentError(f"epochs must be >= 1, got {epochs}")
    if corpus.features is None:
        raise InvalidArgumentError("corpus has no features to encode")
    qpos = {q: i for i, q in enumerate(queries.query_ids)}
    pairs = []
    for q in sorted(labels, key=lambda q: qpos.get(q, -1)):
        if q not in qpos:
            raise InvalidArgumentError(f"labeled query {q!r} has no features")
        pairs.extend((qpos[q], corpus.row(d), q) for d in sorted(labels[q]))
    given = None
    if not isinstance(negative_source, str):
        given = {q: corpus.rows(ds) for q, ds in negative_source.items()}
    elif negative_source != "random":
        raise InvalidArgumentError(f"unknown negative source {negative_source!r}")
    positives = {q: set(corpus.rows(labels[q]).tolist()) for q in labels}

    rng = make_rng(seed)
    N = len(corpus)
    Fd = corpus.features
    Fq = queries.features
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [pairs[i] for i in order[start:start + batch_size]]
            neg = np.empty(len(batch), dtype=np.int64)
            for j, (_, _, q) in enumerate(batch):
                while True:
                    cand = int(rng.choice(given[q])) if given is not None else int(rng.integers(N))
                    if cand not in positives[q]:
                        break
                neg[j] = cand
            xq = Fq[[b[0] for b in batch]]
            xp = Fd[[b[1] for b in batch]]
            xn = Fd[neg]
            q_emb = encode(params_q, xq)
            p_emb = encode(params_d, xp)
            n_emb = encode(params_d, xn)
            loss, alpha = logistic_pair_loss(np.einsum("bd,bd->b", q_emb, p_emb),
                                             np.einsum("bd,bd->b", q_emb, n_emb))
            total += float(loss.sum())
            a = (alpha / len(batch))[:, None]
            gq = encode_backward(params_q, xq, a * (n_emb - p_emb))
            gd = encode_backward(params_d, xp, -a * q_emb).add_(encode_backward(params_d, xn, a * q_emb))
            params_q = _sgd_step(params_q, gq, lr)
            params_d = _sgd_step(params_d, gd, lr)
        history.append(total / len(pairs))
        log.info("stage-1 epoch %d: loss %.5f", epoch + 1, history[-1])
        if not (params_q.is_finite() and params_d.is_finite()):
            raise FloatingPointError(f"encoder parameters became non-finite in epoch {epoch + 1}")
    return params_q, params_d, history


# --- checkpoint file -----------------------------------------------------------

def encode_checkpoint(params: EncoderParams) -> bytes:
    parts = [ENC_MAGIC, struct.pack("<II", ENC_VERSION, len(params.layers))]
    for layer in params.layers:
        out_dim, in_dim = layer.weight.shape
        parts.append(struct.pack("<IIB", in_dim, out_dim, ACTIVATIONS.index(layer.activation)))
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> EncoderParams:
    r = _Reader(buf, "encoder checkpoint")
    if r.take(4) != ENC_MAGIC:
        raise CorruptIndexError("bad magic in encoder checkpoint", 0)
    version, n_layers = r.unpack("<II")
    if version != ENC_VERSION:
        raise CorruptIndexError(f"unsupported checkpoint version {version}", 4)
    if n_layers == 0:
        raise CorruptIndexError("checkpoint has no layers", 8)
    shapes = []
    for _ in range(n_layers):
        pos = r.pos
        in_dim, out_dim, act = r.unpack("<IIB")
        if act >= len(ACTIVATIONS):
            raise CorruptIndexError(f"unknown activation tag {act}", pos + 8)
        shapes.append((in_dim, out_dim, ACTIVATIONS[act]))
    layers = []
    for in_dim, out_dim, act in shapes:
        w = r.array("<f4", in_dim * out_dim).astype(np.float32).reshape(out_dim, in_dim)
        b = r.array("<f4", out_dim).astype(np.float32)
        layers.append(Layer(w, b, act))
    r.expect_end()
    try:
        return EncoderParams(tuple(layers))
    except InvalidArgumentError as exc:
        raise CorruptIndexError(f"inconsistent layer dimensions: {exc}", 12) from None


def save_encoder(params: EncoderParams, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(params))


def load_encoder(path) -> EncoderParams:
    return decode_checkpoint(Path(path).read_bytes())
