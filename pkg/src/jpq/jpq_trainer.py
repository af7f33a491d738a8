"""Joint training of the query encoder and PQ centroids against the compressed index.

The index assignments (codes) and the rotation stay frozen; only the query
encoder and the centroid embeddings move. Each step retrieves hard negatives
with the current encoder and centroids, scores pairs with the reconstructed
document embeddings, and applies AdamW with one learning rate per group.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    CorruptIndexError,
    InvalidArgumentError,
    RelevanceLabels,
    atomic_write_text,
    coerce_fields,
    make_rng,
    parse_kv_text,
)
from .encoder import EncoderParams, GradientBuffer, QuerySet, encode, encode_backward
from .evaluation import MetricReport, RankedRun, evaluate_run
from .pq_index import (
    Codebook,
    CodeMatrix,
    LookupTable,
    adc_scores,
    build_lookup_table,
    topk_rows,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("ranknet", "lambdarank", "hinge")
VARIANTS = ("OPQ", "+JPQ Neg", "+JPQ Loss", "+Train PQ")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_good: "TrainState | None" = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class JpqConfig:
    batch_size: int = 32
    n_hat: int = 200
    negatives_per_query: int = 1
    lr_query: float = 5e-6
    lr_centroids: float = 1e-4
    steps: int = 1000
    pairwise_loss: str = "lambdarank"
    # "pq" scores pairs with reconstructed docs; "full" uses the uncompressed embeddings
    loss_scores: str = "pq"
    weight_decay: float = 0.01
    centroid_weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.n_hat >= self.negatives_per_query >= 1:
            raise InvalidArgumentError("need n_hat >= negatives_per_query >= 1")
        if self.lr_query < 0 or self.lr_centroids < 0:
            raise InvalidArgumentError("learning rates must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise InvalidArgumentError("batch_size must be >= 1 and steps >= 0")
        if self.pairwise_loss not in LOSS_KINDS:
            raise InvalidArgumentError(f"pairwise_loss must be one of {LOSS_KINDS}")
        if self.loss_scores not in ("pq", "full"):
            raise InvalidArgumentError("loss_scores must be 'pq' or 'full'")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], strict: bool = True) -> "JpqConfig":
        return cls(**coerce_fields(cls, values, strict=strict))

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, str] | None = None) -> "JpqConfig":
        values = parse_kv_text(Path(path).read_text(encoding="utf-8"), str(path))
        values.update(overrides or {})
        return cls.from_mapping(values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


@dataclass
class TrainState:
    query_params: EncoderParams
    codebook: Codebook
    codes: CodeMatrix
    doc_embeddings: np.ndarray | None = None  # rotated-space embeddings, only for "full" scores
    enc_m: list[np.ndarray] = field(default_factory=list)
    enc_v: list[np.ndarray] = field(default_factory=list)
    cen_m: np.ndarray | None = None
    cen_v: np.ndarray | None = None
    step: int = 0

    @classmethod
    def initial(cls, query_params: EncoderParams, codebook: Codebook, codes: CodeMatrix,
                doc_embeddings: np.ndarray | None = None) -> "TrainState":
        """Fresh optimizer state; ``doc_embeddings`` are given in the original space."""
        if codes.M != codebook.M:
            raise InvalidArgumentError(f"codes have M={codes.M}, codebook has M={codebook.M}")
        codes.check(codebook.K)
        if query_params.out_dim != codebook.D:
            raise InvalidArgumentError(
                f"query encoder outputs {query_params.out_dim} dims, codebook expects {codebook.D}")
        if doc_embeddings is not None:
            doc_embeddings = codebook.rotate(np.asarray(doc_embeddings, dtype=np.float64))
        return cls(
            query_params, codebook, codes, doc_embeddings,
            [np.zeros(a.shape) for a in query_params.arrays()],
            [np.zeros(a.shape) for a in query_params.arrays()],
            np.zeros(codebook.centroids.shape), np.zeros(codebook.centroids.shape),
        )

    def copy(self) -> "TrainState":
        return TrainState(
            self.query_params.copy(), self.codebook.with_centroids(self.codebook.centroids.copy()),
            self.codes, self.doc_embeddings,
            [m.copy() for m in self.enc_m], [v.copy() for v in self.enc_v],
            None if self.cen_m is None else self.cen_m.copy(),
            None if self.cen_v is None else self.cen_v.copy(),
            self.step,
        )


@dataclass(frozen=True, eq=False)
class PairGradient:
    """Loss weight and the pieces needed to place it on the centroids."""

    alpha: float
    q_sub: np.ndarray  # (M, sub_dim) rotated query split into sub-vectors
    codes_pos: np.ndarray
    codes_neg: np.ndarray

    def __post_init__(self):
        if not self.alpha >= 0:
            raise InvalidArgumentError(f"alpha must be non-negative, got {self.alpha}")


# --- loss ------------------------------------------------------------------------

def pairwise_loss(s_pos: float, s_neg: float, loss_kind: str = "ranknet",
                  weight: float = 1.0) -> tuple[float, float]:
    """Loss and ``alpha = dl/ds_neg = -dl/ds_pos`` for one pair.

    ``lambdarank`` is the logistic loss scaled by ``weight`` (the |delta RR| of
    swapping the pair); ``hinge`` uses a unit margin.
    """
    z = float(s_neg) - float(s_pos)
    if math.isnan(z):
        return math.nan, math.nan
    if loss_kind == "hinge":
        loss = max(0.0, 1.0 + z)
        return loss, (1.0 if loss > 0 else 0.0)
    if loss_kind not in ("ranknet", "lambdarank"):
        raise InvalidArgumentError(f"unknown loss kind {loss_kind!r}")
    loss = float(np.logaddexp(0.0, z))
    alpha = 0.5 * (1.0 + math.tanh(0.5 * z))
    if loss_kind == "lambdarank":
        loss *= weight
        alpha *= weight
    return loss, alpha


def lambda_weight(rank_pos: int | None, rank_neg: int | None) -> float:
    if rank_pos is None or rank_neg is None:
        return 1.0
    return abs(1.0 / rank_pos - 1.0 / rank_neg)


def ranking_oriented_loss(q, codes_pos, codes_neg, cb: Codebook, loss_kind: str = "ranknet",
                          weight: float = 1.0) -> tuple[float, float]:
    """Pairwise loss on the PQ scores of a positive and a negative document."""
    q = np.asarray(q, dtype=np.float64)
    cp = _check_codes(cb, codes_pos)
    cn = _check_codes(cb, codes_neg)
    qr = cb.rotate(q)
    C = cb.centroids64
    idx = np.arange(cb.M)
    s_pos = float(np.dot(qr, C[idx, cp].reshape(-1)))
    s_neg = float(np.dot(qr, C[idx, cn].reshape(-1)))
    return pairwise_loss(s_pos, s_neg, loss_kind, weight)


def _check_codes(cb: Codebook, codes) -> np.ndarray:
    row = np.asarray(codes)
    if row.shape != (cb.M,) or np.any(row < 0) or np.any(row >= cb.K):
        raise CorruptIndexError(f"invalid code row {np.asarray(codes).tolist()} for M={cb.M}, K={cb.K}")
    return row.astype(np.int64)


# --- gradients -------------------------------------------------------------------

def centroid_gradients(pairs: Sequence[PairGradient], cb: Codebook) -> dict[tuple[int, int], np.ndarray]:
    """Sparse gradient of the summed pair losses w.r.t. the centroids.

    Keys are ``(sub_space, centroid)``. A sub-space where both documents use
    the same centroid contributes nothing; centroids no pair touches are absent.
    """
    grad: dict[tuple[int, int], np.ndarray] = {}
    for p in pairs:
        if p.alpha == 0:
            continue
        cp = _check_codes(cb, p.codes_pos)
        cn = _check_codes(cb, p.codes_neg)
        for i in np.flatnonzero(cp != cn):
            step = p.alpha * p.q_sub[i]
            kp, kn = (int(i), int(cp[i])), (int(i), int(cn[i]))
            grad[kp] = grad[kp] - step if kp in grad else -step
            grad[kn] = grad[kn] + step if kn in grad else step.copy()
    return grad


def query_encoder_gradients(params: EncoderParams, features, alphas, recon_pos, recon_neg,
                            cb: Codebook | None = None) -> GradientBuffer:
    """Backpropagate ``sum_b alpha_b * (s(q_b, neg_b) - s(q_b, pos_b))`` into the encoder.

    ``recon_pos``/``recon_neg`` are document vectors in the rotated space; the
    upstream gradient is mapped back through the rotation transpose.
    """
    X = np.atleast_2d(np.asarray(features))
    a = np.asarray(alphas, dtype=np.float64).reshape(-1, 1)
    up = a * (np.atleast_2d(recon_neg) - np.atleast_2d(recon_pos))
    if up.shape[0] != X.shape[0]:
        raise InvalidArgumentError(f"{up.shape[0]} pair terms for {X.shape[0]} feature rows")
    if cb is not None and cb.rotation is not None:
        up = up @ cb.rotation64
    return encode_backward(params, X, up.astype(X.dtype, copy=False))


# --- end-to-end negatives ----------------------------------------------------------

@dataclass(frozen=True)
class NegativeSample:
    rows: np.ndarray  # sampled negative rows
    ranks: np.ndarray  # 1-based rank of each sampled row in the full PQ ranking
    pool: np.ndarray  # the full top-n_hat irrelevant pool, best first


def retrieve_negative_pool(table: LookupTable, codes: CodeMatrix, positives: set[int],
                           n_hat: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``n_hat`` irrelevant rows under the PQ score, and their 1-based ranks."""
    N = len(codes)
    depth = min(N, n_hat + len(positives))
    for attempt in range(2):
        rows, _ = topk_rows(table, codes, depth)
        keep = np.array([r not in positives for r in rows.tolist()], dtype=bool)
        pool = rows[keep][:n_hat]
        if len(pool) or depth >= N:
            break
        depth = min(N, 2 * depth)
    if len(pool) == 0:
        raise InvalidArgumentError("no irrelevant documents left after removing positives")
    ranks = np.flatnonzero(keep)[:n_hat] + 1
    return pool, ranks


def sample_negatives_end_to_end(state: TrainState, query_features, positives: Sequence[set[int]],
                                n_hat: int, k_sample: int,
                                rng: np.random.Generator) -> list[NegativeSample]:
    """Retrieve each query's hard-negative pool with the current parameters and sample from it."""
    if n_hat < k_sample or k_sample < 1:
        raise InvalidArgumentError("need n_hat >= k_sample >= 1")
    Q = encode(state.query_params, np.atleast_2d(query_features))
    out = []
    for q, pos in zip(Q, positives):
        table = build_lookup_table(state.codebook, q)
        pool, ranks = retrieve_negative_pool(table, state.codes, pos, n_hat)
        pick = np.sort(rng.choice(len(pool), size=min(k_sample, len(pool)), replace=False))
        out.append(NegativeSample(pool[pick], ranks[pick], pool))
    return out


def _rank_of(scores: np.ndarray, row: int) -> int:
    s = scores[row]
    return int(np.count_nonzero(scores > s) + np.count_nonzero(scores[:row] == s) + 1)


# --- optimizer ---------------------------------------------------------------------

def _adamw_encoder(state: TrainState, grad: GradientBuffer, cfg: JpqConfig, t: int) -> None:
    if cfg.lr_query == 0:
        return
    b1, b2 = cfg.beta1, cfg.beta2
    new = []
    arrays = state.query_params.arrays()
    for k, (p, g) in enumerate(zip(arrays, grad.grads)):
        g = g.astype(np.float64)
        state.enc_m[k] = b1 * state.enc_m[k] + (1 - b1) * g
        state.enc_v[k] = b2 * state.enc_v[k] + (1 - b2) * g * g
        m_hat = state.enc_m[k] / (1 - b1 ** t)
        v_hat = state.enc_v[k] / (1 - b2 ** t)
        p64 = p.astype(np.float64)
        if p.ndim == 2 and cfg.weight_decay:
            p64 = p64 - cfg.lr_query * cfg.weight_decay * p64
        p64 = p64 - cfg.lr_query * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new.append(p64.astype(p.dtype))
    state.query_params = state.query_params.with_arrays(new)


def _adamw_centroids(state: TrainState, grad: Mapping[tuple[int, int], np.ndarray],
                     cfg: JpqConfig, t: int) -> None:
    """Lazy AdamW: only centroids with a gradient this step are touched."""
    if cfg.lr_centroids == 0 or not grad:
        return
    b1, b2 = cfg.beta1, cfg.beta2
    keys = sorted(grad)
    ii = np.array([k[0] for k in keys])
    jj = np.array([k[1] for k in keys])
    g = np.stack([grad[k] for k in keys]).astype(np.float64)
    C = state.codebook.centroids.copy()
    m = b1 * state.cen_m[ii, jj] + (1 - b1) * g
    v = b2 * state.cen_v[ii, jj] + (1 - b2) * g * g
    state.cen_m[ii, jj] = m
    state.cen_v[ii, jj] = v
    rows = C[ii, jj].astype(np.float64)
    if cfg.centroid_weight_decay:
        rows = rows - cfg.lr_centroids * cfg.centroid_weight_decay * rows
    rows = rows - cfg.lr_centroids * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + cfg.eps)
    C[ii, jj] = rows.astype(C.dtype)
    state.codebook = state.codebook.with_centroids(C)


# --- training loop -------------------------------------------------------------------

@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    mrr10: float | None = None
    recall100: float | None = None


def evaluate_state(state: TrainState, queries: QuerySet, labels: RelevanceLabels,
                   ks: Sequence[int] = (10, 100), name: str = "") -> MetricReport:
    """PQ retrieval metrics of the current encoder and centroids on labeled queries."""
    n = max(ks)
    Q = encode(state.query_params, queries.features)
    ids = state.codes.doc_ids
    run = RankedRun()
    for qid, q in zip(queries.query_ids, Q):
        if qid not in labels:
            continue
        rows, scores = topk_rows(build_lookup_table(state.codebook, q), state.codes, n)
        run.add(qid, [(ids[r], s) for r, s in zip(rows.tolist(), scores.tolist())])
    return evaluate_run(run, labels, ks, name=name, metrics=("mrr", "recall"))


def _training_pairs(queries: QuerySet, labels: RelevanceLabels, codes: CodeMatrix):
    row = {d: i for i, d in enumerate(codes.doc_ids)}
    qpos = {q: i for i, q in enumerate(queries.query_ids)}
    items = []
    for q in queries.query_ids:
        if q in labels:
            items.append((qpos[q], {row[d] for d in labels[q]}))
    if not items:
        raise InvalidArgumentError("no training query has relevance labels")
    return items


def jpq_train(state: TrainState, queries: QuerySet, labels: RelevanceLabels, config: JpqConfig,
              eval_queries: QuerySet | None = None, eval_labels: RelevanceLabels | None = None
              ) -> tuple[TrainState, list[StepMetrics]]:
    """Run ``config.steps`` joint-optimization steps starting from ``state``.

    The input state is not modified. The codes and rotation are shared, never
    written. Raises ``DivergenceError`` (carrying the last finite state) if
    the loss stops being finite.
    """
    cfg = config
    if cfg.loss_scores == "full" and state.doc_embeddings is None:
        raise InvalidArgumentError("loss_scores='full' needs document embeddings in the train state")
    state = state.copy()
    items = _training_pairs(queries, labels, state.codes)
    rng = make_rng(cfg.seed)
    X = queries.features
    codes = state.codes.codes
    metrics: list[StepMetrics] = []
    order = rng.permutation(len(items))
    cursor = 0
    lambdarank = cfg.pairwise_loss == "lambdarank"

    for _ in range(cfg.steps):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(items))
            cursor = 0
        batch = [items[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        xb = X[[b[0] for b in batch]]
        pos_sets = [b[1] for b in batch]

        # one parameter snapshot for the whole batch
        Q = encode(state.query_params, xb).astype(np.float64)
        Qr = state.codebook.rotate(Q)
        C = state.codebook.centroids64
        pairs: list[PairGradient] = []
        feat_rows, alphas, pos_vecs, neg_vecs = [], [], [], []
        total = 0.0
        for b, (q, qr, pos) in enumerate(zip(Q, Qr, pos_sets)):
            table = build_lookup_table(state.codebook, q)
            pool, ranks = retrieve_negative_pool(table, state.codes, pos, cfg.n_hat)
            pick = np.sort(rng.choice(len(pool), size=min(cfg.negatives_per_query, len(pool)),
                                      replace=False))
            all_scores = adc_scores(table, state.codes) if lambdarank else None
            q_sub = qr.reshape(state.codebook.M, state.codebook.sub_dim)
            for p_row in sorted(pos):
                rank_pos = _rank_of(all_scores, p_row) if lambdarank else None
                for n_row, rank_neg in zip(pool[pick], ranks[pick]):
                    if cfg.loss_scores == "pq":
                        dp = C[np.arange(state.codebook.M), codes[p_row]].reshape(-1)
                        dn = C[np.arange(state.codebook.M), codes[n_row]].reshape(-1)
                    else:
                        dp = state.doc_embeddings[p_row]
                        dn = state.doc_embeddings[n_row]
                    weight = lambda_weight(rank_pos, int(rank_neg)) if lambdarank else 1.0
                    loss, alpha = pairwise_loss(float(qr @ dp), float(qr @ dn), cfg.pairwise_loss, weight)
                    if not (math.isfinite(loss) and math.isfinite(alpha)):
                        raise DivergenceError(f"non-finite loss at step {state.step + 1}", state)
                    total += loss
                    pairs.append(PairGradient(alpha, q_sub, codes[p_row], codes[n_row]))
                    feat_rows.append(b)
                    alphas.append(alpha)
                    pos_vecs.append(dp)
                    neg_vecs.append(dn)

        if not math.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {state.step + 1}", state)
        t = state.step + 1
        enc_grad = query_encoder_gradients(state.query_params, xb[feat_rows], alphas,
                                           np.array(pos_vecs), np.array(neg_vecs), state.codebook)
        cen_grad = centroid_gradients(pairs, state.codebook) if cfg.lr_centroids > 0 else {}
        if not all(np.all(np.isfinite(g)) for g in enc_grad.grads):
            raise DivergenceError(f"non-finite encoder gradient at step {t}", state)
        last_good = state.copy()
        _adamw_encoder(state, enc_grad, cfg, t)
        _adamw_centroids(state, cen_grad, cfg, t)
        if not (state.query_params.is_finite() and np.all(np.isfinite(state.codebook.centroids))):
            raise DivergenceError(f"parameters became non-finite at step {t}", last_good)
        state.step = t

        mrr = rec = None
        if eval_queries is not None and cfg.eval_every and t % cfg.eval_every == 0:
            report = evaluate_state(state, eval_queries, eval_labels)
            mrr, rec = report["mrr@10"], report["recall@100"]
            log.info("step %d: loss %.5f  mrr@10 %.4f  recall@100 %.4f", t, total / len(pairs), mrr, rec)
        metrics.append(StepMetrics(t, total / len(pairs), mrr, rec))
    return state, metrics


def write_metrics_csv(metrics: Sequence[StepMetrics], path) -> None:
    def fmt(v):
        return "" if v is None else f"{v:.6f}"
    lines = ["step,loss,mrr10,recall100"]
    lines += [f"{m.step},{m.loss:.8f},{fmt(m.mrr10)},{fmt(m.recall100)}" for m in metrics]
    atomic_write_text(path, "\n".join(lines) + "\n")


# --- ablation --------------------------------------------------------------------------

def variant_config(variant: str, config: JpqConfig) -> JpqConfig | None:
    """Training config for one ablation variant (``None`` means no training)."""
    if variant == "OPQ":
        return None
    if variant == "+JPQ Neg":
        return dataclasses.replace(config, loss_scores="full", lr_centroids=0.0)
    if variant == "+JPQ Loss":
        return dataclasses.replace(config, loss_scores="pq", lr_centroids=0.0)
    if variant == "+Train PQ":
        return dataclasses.replace(config, loss_scores="pq")
    raise InvalidArgumentError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def ablation_variants(state: TrainState, queries: QuerySet, labels: RelevanceLabels,
                      eval_queries: QuerySet, eval_labels: RelevanceLabels, config: JpqConfig,
                      variants: Sequence[str] = VARIANTS) -> dict[str, MetricReport]:
    """MRR@10 and Recall@100 of each ablation variant, all starting from ``state``."""
    out = {}
    for name in variants:
        cfg = variant_config(name, config)
        trained = state if cfg is None else jpq_train(state, queries, labels, cfg)[0]
        out[name] = evaluate_state(trained, eval_queries, eval_labels, name=name)
        log.info("%s: mrr@10 %.4f recall@100 %.4f", name, out[name]["mrr@10"], out[name]["recall@100"])
    return out
