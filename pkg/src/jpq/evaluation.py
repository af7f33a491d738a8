"""Exhaustive search, truncated ranking metrics, run comparison, and TREC-style TSV files."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .core import InvalidArgumentError, RelevanceLabels, atomic_write_text

log = logging.getLogger(__name__)


class RunFormatError(InvalidArgumentError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class RankedRun:
    """Per-query ranked lists of ``(doc_id, score)``."""

    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def __post_init__(self):
        for q, ranking in self.rankings.items():
            self._validate(q, ranking)

    @staticmethod
    def _validate(q: str, ranking: Sequence[tuple[str, float]]) -> None:
        ids = [d for d, _ in ranking]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError(f"duplicate documents in ranking for query {q!r}")
        scores = [s for _, s in ranking]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise InvalidArgumentError(f"scores for query {q!r} are not non-increasing")

    def add(self, query_id: str, ranking: Iterable[tuple[str, float]]) -> None:
        ranking = [(d, float(s)) for d, s in ranking]
        self._validate(query_id, ranking)
        self.rankings[query_id] = ranking

    def __len__(self) -> int:
        return len(self.rankings)


def brute_force_search(embeddings, q, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-``n`` rows by inner product; equal scores go to the smaller row.

    Returns ``(rows, scores)``.
    """
    E = np.asarray(embeddings)
    q = np.asarray(q)
    if E.ndim != 2 or E.shape[0] == 0:
        raise InvalidArgumentError("cannot search an empty corpus")
    if q.ndim != 1 or q.shape[0] != E.shape[1]:
        raise InvalidArgumentError(f"query dimension {q.shape} does not match corpus {E.shape[1]}")
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    scores = E @ q
    n = min(n, len(scores))
    if n < len(scores):
        # keep every row tied with the n-th score so the tie rule sees them all
        kth = np.partition(scores, len(scores) - n)[len(scores) - n]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(len(scores))
    order = cand[np.lexsort((cand, -scores[cand]))][:n]
    return order, scores[order]


def _check_queries(run: RankedRun, labels: Mapping[str, frozenset], k: int) -> None:
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    missing = [q for q in run.rankings if q not in labels]
    if missing:
        raise InvalidArgumentError(f"queries missing from labels: {missing[:5]}")


def _per_query(run: RankedRun, labels, k: int, fn) -> dict[str, float]:
    _check_queries(run, labels, k)
    return {q: fn([d for d, _ in ranking[:k]], labels[q], k) for q, ranking in run.rankings.items()}


def _rr(top: list[str], rel: frozenset, k: int) -> float:
    for rank, d in enumerate(top, start=1):
        if d in rel:
            return 1.0 / rank
    return 0.0


def _recall(top: list[str], rel: frozenset, k: int) -> float:
    return len(rel.intersection(top)) / len(rel)


def _ndcg(top: list[str], rel: frozenset, k: int) -> float:
    dcg = sum(1.0 / math.log2(rank + 1) for rank, d in enumerate(top, start=1) if d in rel)
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(rel), k) + 1))
    return dcg / ideal


def _mean(values: Mapping[str, float]) -> float:
    return float(np.mean(list(values.values()))) if values else 0.0


def mrr_at_k(run: RankedRun, labels, k: int) -> float:
    return _mean(_per_query(run, labels, k, _rr))


def recall_at_k(run: RankedRun, labels, k: int) -> float:
    return _mean(_per_query(run, labels, k, _recall))


def ndcg_at_k(run: RankedRun, labels, k: int) -> float:
    """Binary-gain NDCG with a ``1/log2(rank+1)`` discount."""
    return _mean(_per_query(run, labels, k, _ndcg))


_METRIC_FNS = {"mrr": _rr, "recall": _recall, "ndcg": _ndcg}


@dataclass
class MetricReport:
    """Aggregate metrics keyed like ``"mrr@10"`` plus per-query values."""

    values: dict[str, float]
    per_query: dict[str, dict[str, float]]
    name: str = ""

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    @property
    def mrr_at_k(self) -> dict[int, float]:
        return {int(k.split("@")[1]): v for k, v in self.values.items() if k.startswith("mrr@")}

    @property
    def recall_at_k(self) -> dict[int, float]:
        return {int(k.split("@")[1]): v for k, v in self.values.items() if k.startswith("recall@")}

    @property
    def ndcg_at_k(self) -> dict[int, float]:
        return {int(k.split("@")[1]): v for k, v in self.values.items() if k.startswith("ndcg@")}


def evaluate_run(run: RankedRun, labels, ks: Sequence[int] = (10, 100), name: str = "",
                 metrics: Sequence[str] = ("mrr", "recall", "ndcg")) -> MetricReport:
    values, per_query = {}, {}
    for metric in metrics:
        for k in ks:
            key = f"{metric}@{k}"
            per_query[key] = _per_query(run, labels, k, _METRIC_FNS[metric])
            values[key] = _mean(per_query[key])
    return MetricReport(values, per_query, name)


@dataclass(frozen=True)
class Comparison:
    metric: str
    baseline: str
    other: str
    mean_delta: float
    t: float
    p: float
    degenerate: bool  # zero variance of the per-query deltas


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, bool]:
    """Two-tailed paired t-test of ``b - a``; returns ``(t, p, degenerate)``.

    Zero-variance deltas give ``t = 0, p = 1`` when all deltas are zero and
    ``t = +-inf, p = 0`` otherwise, with ``degenerate`` set.
    """
    d = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    n = len(d)
    if n < 2:
        raise InvalidArgumentError("paired t-test needs at least two queries")
    mean = d.mean()
    sd = d.std(ddof=1)
    # deltas equal up to rounding count as zero variance
    if sd <= 1e-12 * max(1.0, abs(mean)):
        if mean == 0.0:
            return 0.0, 1.0, True
        return math.copysign(math.inf, mean), 0.0, True
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return float(t), p, False


def compare_runs(reports: Sequence[MetricReport], labels=None) -> list[Comparison]:
    """Paired tests of every report against the first one, per shared metric."""
    if len(reports) < 2:
        raise InvalidArgumentError("need at least two reports to compare")
    base = reports[0]
    out = []
    for other in reports[1:]:
        for metric, base_q in base.per_query.items():
            if metric not in other.per_query:
                continue
            other_q = other.per_query[metric]
            if set(base_q) != set(other_q):
                raise InvalidArgumentError(f"reports cover different query sets for {metric}")
            if labels is not None and not set(base_q) <= set(labels):
                raise InvalidArgumentError("reports contain queries without labels")
            qs = sorted(base_q)
            a = [base_q[q] for q in qs]
            b = [other_q[q] for q in qs]
            t, p, degenerate = paired_t_test(a, b)
            out.append(Comparison(metric, base.name, other.name, float(np.mean(b) - np.mean(a)),
                                  t, p, degenerate))
    return out


# --- file formats --------------------------------------------------------------

def format_run(run: RankedRun) -> str:
    lines = []
    for q, ranking in run.rankings.items():
        for rank, (d, s) in enumerate(ranking, start=1):
            lines.append(f"{q}\t{d}\t{rank}\t{s:.9g}\n")
    return "".join(lines)


def write_run(run: RankedRun, path) -> None:
    atomic_write_text(path, format_run(run))


def read_run(path) -> RankedRun:
    rankings: dict[str, list[tuple[str, float]]] = {}
    expected_rank: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise RunFormatError(f"expected 4 tab-separated fields, got {len(parts)}", path, lineno)
            q, d, rank_s, score_s = parts
            try:
                rank, score = int(rank_s), float(score_s)
            except ValueError:
                raise RunFormatError("rank must be an integer and score a number", path, lineno) from None
            want = expected_rank.get(q, 1)
            if rank != want:
                raise RunFormatError(f"rank {rank} for query {q!r}, expected {want}", path, lineno)
            expected_rank[q] = want + 1
            ranking = rankings.setdefault(q, [])
            if ranking and score > ranking[-1][1]:
                raise RunFormatError(f"score increases at rank {rank} for query {q!r}", path, lineno)
            if any(d == x for x, _ in ranking):
                raise RunFormatError(f"duplicate document {d!r} for query {q!r}", path, lineno)
            ranking.append((d, score))
    return RankedRun(rankings)


def format_qrels(labels: Mapping[str, Iterable[str]]) -> str:
    return "".join(f"{q}\t0\t{d}\t1\n" for q in labels for d in sorted(labels[q]))


def write_qrels(labels: Mapping[str, Iterable[str]], path) -> None:
    atomic_write_text(path, format_qrels(labels))


def read_qrels(path, corpus=None) -> RelevanceLabels:
    labels: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise RunFormatError(f"expected 4 tab-separated fields, got {len(parts)}", path, lineno)
            q, _, d, rel = parts
            try:
                rel_v = int(rel)
            except ValueError:
                raise RunFormatError(f"relevance must be an integer, got {rel!r}", path, lineno) from None
            if rel_v > 0:
                labels.setdefault(q, set()).add(d)
    return RelevanceLabels(labels, corpus)


def format_report(report: MetricReport) -> str:
    width = max((len(k) for k in report.values), default=6)
    lines = [f"{'metric':<{width}}  value"]
    lines += [f"{k:<{width}}  {v:.4f}" for k, v in report.values.items()]
    return "\n".join(lines)


def report_csv(reports: Sequence[MetricReport]) -> str:
    keys = list(reports[0].values) if reports else []
    lines = ["name," + ",".join(keys)]
    for r in reports:
        lines.append(r.name + "," + ",".join(f"{r.values[k]:.6f}" for k in keys))
    return "\n".join(lines) + "\n"


def write_report_csv(reports: Sequence[MetricReport], path) -> None:
    atomic_write_text(Path(path), report_csv(reports))
