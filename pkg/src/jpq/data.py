"""Seeded synthetic retrieval datasets and the on-disk dataset layout."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Corpus, InvalidArgumentError, RelevanceLabels, make_rng, read_emb, write_emb
from .encoder import QuerySet
from .evaluation import read_qrels, write_qrels

CORPUS_FILE = "corpus.emb"
TRAIN_QUERIES_FILE = "queries.train.emb"
EVAL_QUERIES_FILE = "queries.eval.emb"
TRAIN_QRELS_FILE = "qrels.train.tsv"
EVAL_QRELS_FILE = "qrels.eval.tsv"


@dataclass(frozen=True)
class SyntheticSpec:
    num_docs: int = 5000
    num_train_queries: int = 2000
    num_eval_queries: int = 500
    feature_dim: int = 32
    relevant_per_query: int = 1
    noise_scale: float = 0.1
    num_clusters: int = 100
    cluster_spread: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.relevant_per_query < 1:
            raise InvalidArgumentError("relevant_per_query must be >= 1")
        if self.noise_scale < 0:
            raise InvalidArgumentError("noise_scale must be >= 0")
        if self.num_docs < self.relevant_per_query:
            raise InvalidArgumentError("num_docs must be at least relevant_per_query")
        if min(self.num_docs, self.feature_dim, self.num_clusters) < 1:
            raise InvalidArgumentError("num_docs, feature_dim and num_clusters must be positive")
        if self.num_train_queries < 0 or self.num_eval_queries < 0:
            raise InvalidArgumentError("query counts must be non-negative")


@dataclass(frozen=True)
class Dataset:
    corpus: Corpus
    train_queries: QuerySet
    train_labels: RelevanceLabels
    eval_queries: QuerySet
    eval_labels: RelevanceLabels


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Clustered unit-norm document features; each query is a noisy copy of one doc.

    Additional relevant documents (``relevant_per_query > 1``) are the
    designated document's nearest neighbours in feature space.
    """
    rng = make_rng(spec.seed)
    F = spec.feature_dim
    centers = rng.normal(size=(spec.num_clusters, F))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    assign = rng.integers(spec.num_clusters, size=spec.num_docs)
    docs = centers[assign] + spec.cluster_spread / np.sqrt(F) * rng.normal(size=(spec.num_docs, F))
    docs /= np.linalg.norm(docs, axis=1, keepdims=True)
    docs = docs.astype(np.float32)
    doc_ids = tuple(f"d{i}" for i in range(spec.num_docs))

    n_q = spec.num_train_queries + spec.num_eval_queries
    replace = n_q > spec.num_docs
    targets = rng.choice(spec.num_docs, size=n_q, replace=replace)
    noise = rng.normal(size=(n_q, F))
    qfeat = (docs[targets].astype(np.float64) + spec.noise_scale * noise).astype(np.float32)

    labels = {}
    qids = [f"q{i}" for i in range(n_q)]
    for qid, t in zip(qids, targets):
        rel = [int(t)]
        if spec.relevant_per_query > 1:
            sims = docs @ docs[t]
            sims[t] = -np.inf
            order = np.lexsort((np.arange(len(sims)), -sims))
            rel += [int(r) for r in order[:spec.relevant_per_query - 1]]
        labels[qid] = {doc_ids[r] for r in rel}

    corpus = Corpus(doc_ids, features=docs)
    ntr = spec.num_train_queries
    tr_ids, ev_ids = qids[:ntr], qids[ntr:]
    return Dataset(
        corpus,
        QuerySet(tuple(tr_ids), qfeat[:ntr]),
        RelevanceLabels({q: labels[q] for q in tr_ids}, corpus),
        QuerySet(tuple(ev_ids), qfeat[ntr:]),
        RelevanceLabels({q: labels[q] for q in ev_ids}, corpus),
    )


def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_emb(out / CORPUS_FILE, ds.corpus.doc_ids, ds.corpus.features)
    write_emb(out / TRAIN_QUERIES_FILE, ds.train_queries.query_ids, ds.train_queries.features)
    write_emb(out / EVAL_QUERIES_FILE, ds.eval_queries.query_ids, ds.eval_queries.features)
    write_qrels(ds.train_labels, out / TRAIN_QRELS_FILE)
    write_qrels(ds.eval_labels, out / EVAL_QRELS_FILE)


def read_queries(path) -> QuerySet:
    ids, feats = read_emb(path)
    return QuerySet(tuple(ids), feats)


def read_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    for name in (CORPUS_FILE, TRAIN_QUERIES_FILE, EVAL_QUERIES_FILE, TRAIN_QRELS_FILE, EVAL_QRELS_FILE):
        if not (d / name).exists():
            raise InvalidArgumentError(f"missing dataset file: {d / name}")
    ids, feats = read_emb(d / CORPUS_FILE)
    corpus = Corpus(tuple(ids), features=feats)
    return Dataset(
        corpus,
        read_queries(d / TRAIN_QUERIES_FILE),
        read_qrels(d / TRAIN_QRELS_FILE, corpus),
        read_queries(d / EVAL_QUERIES_FILE),
        read_qrels(d / EVAL_QRELS_FILE, corpus),
    )
