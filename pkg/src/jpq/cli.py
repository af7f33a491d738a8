"""Command-line pipeline: synthetic data, stage-1 encoders, OPQ index, joint training, search, eval.

Every subcommand reads one flat ``key = value`` config file (``--config``)
plus ``key=value`` overrides. Artifacts are named by a hash of the config
fields that produced them, so a changed setting never reuses a stale file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (
    CorruptIndexError,
    InvalidArgumentError,
    coerce_fields,
    parse_kv_text,
    read_emb,
    write_emb,
)
from .data import SyntheticSpec, generate_synthetic, read_dataset, read_queries, write_dataset
from .encoder import encode, init_encoder, load_encoder, save_encoder, train_dual_encoders
from .evaluation import (
    RankedRun,
    brute_force_search,
    evaluate_run,
    format_report,
    read_qrels,
    read_run,
    write_report_csv,
    write_run,
)
from .jpq_trainer import (
    VARIANTS,
    DivergenceError,
    JpqConfig,
    TrainState,
    ablation_variants,
    evaluate_state,
    jpq_train,
    write_metrics_csv,
)
from .pq_index import (
    build_lookup_table,
    deserialize_index,
    quantize_corpus,
    reconstruction_error,
    search_table,
    serialize_index,
    train_opq_rotation,
)

log = logging.getLogger("jpq")

EXIT_CODES = {
    InvalidArgumentError: 2,
    CorruptIndexError: 3,
    OSError: 4,
    DivergenceError: 5,
}


@dataclass(frozen=True)
class PipelineConfig:
    work_dir: str = "jpq-work"
    data_dir: str = ""  # empty: generated under work_dir
    seed: int = 0

    # synthetic dataset
    num_docs: int = 5000
    num_train_queries: int = 2000
    num_eval_queries: int = 500
    feature_dim: int = 32
    relevant_per_query: int = 1
    noise_scale: float = 0.1
    num_clusters: int = 100
    cluster_spread: float = 0.5

    # stage-1 dual encoders
    embed_dim: int = 64
    hidden: tuple[int, ...] = (64,)
    enc_epochs: int = 20
    enc_lr: float = 0.2
    enc_batch_size: int = 32

    # OPQ index
    M: int = 8
    K: int = 64
    opq_iters: int = 5
    kmeans_iters: int = 25

    # joint training
    steps: int = 5000
    batch_size: int = 32
    n_hat: int = 200
    negatives_per_query: int = 1
    lr_query: float = 1e-3
    lr_centroids: float = 3e-4
    pairwise_loss: str = "lambdarank"
    weight_decay: float = 0.01
    centroid_weight_decay: float = 0.0
    eval_every: int = 1000

    # search and evaluation
    search_index: str = "jpq"  # "jpq" (jointly trained) or "opq" (stage-2 index)
    search_n: int = 100
    ks: tuple[int, ...] = (10, 100)
    latency_queries: int = 200
    warmup_queries: int = 5

    def __post_init__(self):
        if self.M < 1 or self.embed_dim % self.M:
            raise InvalidArgumentError(f"embed_dim={self.embed_dim} is not divisible by M={self.M}")
        if self.search_index not in ("jpq", "opq"):
            raise InvalidArgumentError("search_index must be 'jpq' or 'opq'")
        if self.search_n < 1 or not self.ks or min(self.ks) < 1:
            raise InvalidArgumentError("search_n and every k must be >= 1")
        if self.latency_queries < 100 or self.warmup_queries < 0:
            raise InvalidArgumentError("latency needs >= 100 timed queries and a non-negative warmup")
        self.jpq_config()  # validate the training fields early

    @classmethod
    def load(cls, path=None, overrides: Sequence[str] = ()) -> "PipelineConfig":
        values = {}
        if path is not None:
            values.update(parse_kv_text(Path(path).read_text(encoding="utf-8"), str(path)))
        for item in overrides:
            if "=" not in item:
                raise InvalidArgumentError(f"override must be key=value, got {item!r}")
            key, value = item.split("=", 1)
            values[key.strip()] = value.strip()
        return cls(**coerce_fields(cls, values))

    def to_text(self) -> str:
        def fmt(v):
            return ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return "".join(f"{f.name} = {fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.num_docs, self.num_train_queries, self.num_eval_queries,
                             self.feature_dim, self.relevant_per_query, self.noise_scale,
                             self.num_clusters, self.cluster_spread, self.seed)

    def jpq_config(self) -> JpqConfig:
        return JpqConfig(
            batch_size=self.batch_size, n_hat=self.n_hat, negatives_per_query=self.negatives_per_query,
            lr_query=self.lr_query, lr_centroids=self.lr_centroids, steps=self.steps,
            pairwise_loss=self.pairwise_loss, weight_decay=self.weight_decay,
            centroid_weight_decay=self.centroid_weight_decay, eval_every=self.eval_every,
            seed=self.seed,
        )


_DATA_KEYS = ("data_dir", "seed", "num_docs", "num_train_queries", "num_eval_queries", "feature_dim",
              "relevant_per_query", "noise_scale", "num_clusters", "cluster_spread")
_ENC_KEYS = ("embed_dim", "hidden", "enc_epochs", "enc_lr", "enc_batch_size")
_INDEX_KEYS = ("M", "K", "opq_iters", "kmeans_iters")
_JPQ_KEYS = ("steps", "batch_size", "n_hat", "negatives_per_query", "lr_query", "lr_centroids",
             "pairwise_loss", "weight_decay", "centroid_weight_decay")


def _stage_hash(cfg: PipelineConfig, keys: Sequence[str], parent: str = "") -> str:
    text = parent + "".join(f"{k}={getattr(cfg, k)!r}\n" for k in keys)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class Artifacts:
    """Paths of every pipeline output for one config."""

    data_dir: Path
    query_encoder: Path
    doc_encoder: Path
    doc_embeddings: Path
    index: Path
    jpq_index: Path
    jpq_query_encoder: Path
    jpq_metrics: Path
    ablation: Path
    run: Path

    @classmethod
    def of(cls, cfg: PipelineConfig) -> "Artifacts":
        work = Path(cfg.work_dir)
        h_data = _stage_hash(cfg, _DATA_KEYS)
        h_enc = _stage_hash(cfg, _ENC_KEYS, h_data)
        h_idx = _stage_hash(cfg, _INDEX_KEYS, h_enc)
        h_jpq = _stage_hash(cfg, _JPQ_KEYS, h_idx)
        h_run = _stage_hash(cfg, ("search_index", "search_n"), h_jpq if cfg.search_index == "jpq" else h_idx)
        data_dir = Path(cfg.data_dir) if cfg.data_dir else work / f"data-{h_data}"
        return cls(
            data_dir=data_dir,
            query_encoder=work / f"enc-{h_enc}.query.enc",
            doc_encoder=work / f"enc-{h_enc}.doc.enc",
            doc_embeddings=work / f"enc-{h_enc}.corpus.emb",
            index=work / f"index-{h_idx}.jpq",
            jpq_index=work / f"jpq-{h_jpq}.jpq",
            jpq_query_encoder=work / f"jpq-{h_jpq}.query.enc",
            jpq_metrics=work / f"jpq-{h_jpq}.metrics.csv",
            ablation=work / f"ablation-{h_jpq}.csv",
            run=work / f"run-{h_run}.tsv",
        )

    def search_inputs(self, cfg: PipelineConfig) -> tuple[Path, Path]:
        if cfg.search_index == "jpq":
            return self.jpq_index, self.jpq_query_encoder
        return self.index, self.query_encoder


def _require(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"required input does not exist: {p}")


def _work_dir(cfg: PipelineConfig) -> Path:
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    return work


# --- subcommands -------------------------------------------------------------------

def cmd_gen_synthetic(cfg: PipelineConfig) -> Path:
    out = Artifacts.of(cfg).data_dir
    write_dataset(generate_synthetic(cfg.synthetic_spec()), out)
    log.info("wrote synthetic dataset to %s", out)
    return out


def cmd_train_encoders(cfg: PipelineConfig) -> Artifacts:
    art = Artifacts.of(cfg)
    ds = read_dataset(art.data_dir)
    _work_dir(cfg)
    F = ds.corpus.features.shape[1]
    pq = init_encoder(F, cfg.embed_dim, cfg.hidden, seed=cfg.seed + 1)
    pd = init_encoder(F, cfg.embed_dim, cfg.hidden, seed=cfg.seed + 2)
    pq, pd, history = train_dual_encoders(pq, pd, ds.corpus, ds.train_labels, ds.train_queries,
                                          epochs=cfg.enc_epochs, lr=cfg.enc_lr, seed=cfg.seed + 3,
                                          batch_size=cfg.enc_batch_size)
    save_encoder(pq, art.query_encoder)
    save_encoder(pd, art.doc_encoder)
    write_emb(art.doc_embeddings, ds.corpus.doc_ids, encode(pd, ds.corpus.features))
    log.info("stage-1 loss %.5f -> %.5f; wrote %s", history[0], history[-1], art.doc_embeddings)
    return art


def cmd_build_index(cfg: PipelineConfig) -> int:
    art = Artifacts.of(cfg)
    _require(art.doc_embeddings)
    ids, E = read_emb(art.doc_embeddings)
    if E.shape[1] % cfg.M:
        raise InvalidArgumentError(f"embedding dimension {E.shape[1]} is not divisible by M={cfg.M}")
    cb = train_opq_rotation(E, cfg.M, cfg.K, outer_iters=cfg.opq_iters, seed=cfg.seed,
                            kmeans_iters=cfg.kmeans_iters)
    codes = quantize_corpus(cb, E, ids)
    payload = serialize_index(cb, codes, art.index)
    log.info("reconstruction error %.6g; payload %d bytes; wrote %s",
             reconstruction_error(cb, E, codes), payload, art.index)
    print(f"payload_bytes\t{payload}")
    return payload


def _save_state(state: TrainState, index_path: Path, encoder_path: Path) -> None:
    serialize_index(state.codebook, state.codes, index_path)
    save_encoder(state.query_params, encoder_path)


def cmd_train_jpq(cfg: PipelineConfig) -> Artifacts:
    art = Artifacts.of(cfg)
    _require(art.index, art.query_encoder)
    ds = read_dataset(art.data_dir)
    cb, codes = deserialize_index(art.index)
    state = TrainState.initial(load_encoder(art.query_encoder), cb, codes)
    try:
        trained, metrics = jpq_train(state, ds.train_queries, ds.train_labels, cfg.jpq_config(),
                                     ds.eval_queries, ds.eval_labels)
    except DivergenceError as exc:
        if exc.last_good is not None:
            idx = art.jpq_index.with_suffix(".last-good.jpq")
            enc = art.jpq_query_encoder.with_suffix(".last-good.enc")
            _save_state(exc.last_good, idx, enc)
            log.error("training diverged; last good state kept in %s and %s", idx, enc)
        raise
    _save_state(trained, art.jpq_index, art.jpq_query_encoder)
    write_metrics_csv(metrics, art.jpq_metrics)
    before = evaluate_state(state, ds.eval_queries, ds.eval_labels, cfg.ks)
    after = evaluate_state(trained, ds.eval_queries, ds.eval_labels, cfg.ks)
    print(f"mrr@10\tinitial\t{before['mrr@10']:.4f}\ttrained\t{after['mrr@10']:.4f}")
    return art


def cmd_ablation(cfg: PipelineConfig) -> dict:
    art = Artifacts.of(cfg)
    _require(art.index, art.query_encoder, art.doc_embeddings)
    ds = read_dataset(art.data_dir)
    cb, codes = deserialize_index(art.index)
    _, E = read_emb(art.doc_embeddings)
    state = TrainState.initial(load_encoder(art.query_encoder), cb, codes, E)
    reports = ablation_variants(state, ds.train_queries, ds.train_labels, ds.eval_queries,
                                ds.eval_labels, cfg.jpq_config(), VARIANTS)
    write_report_csv(list(reports.values()), art.ablation)
    print(f"{'variant':<12}  mrr@10  recall@100")
    for name, r in reports.items():
        print(f"{name:<12}  {r['mrr@10']:.4f}  {r['recall@100']:.4f}")
    return reports


def _load_search_inputs(cfg: PipelineConfig, queries_path=None):
    art = Artifacts.of(cfg)
    index_path, encoder_path = art.search_inputs(cfg)
    queries_path = Path(queries_path) if queries_path else art.data_dir / "queries.eval.emb"
    _require(index_path, encoder_path, queries_path)
    cb, codes = deserialize_index(index_path)
    queries = read_queries(queries_path)
    return cb, codes, queries, encode(load_encoder(encoder_path), queries.features)


def cmd_search(cfg: PipelineConfig, queries_path=None, out_path=None) -> Path:
    cb, codes, queries, Q = _load_search_inputs(cfg, queries_path)
    out = Path(out_path) if out_path else Artifacts.of(cfg).run
    run = RankedRun()
    elapsed = 0.0
    for qid, q in zip(queries.query_ids, Q):
        t0 = time.perf_counter()
        res = search_table(build_lookup_table(cb, q), codes, cfg.search_n)
        elapsed += time.perf_counter() - t0
        run.add(qid, zip(res.doc_ids, res.scores))
    _work_dir(cfg)
    write_run(run, out)
    if len(queries):
        log.info("mean search latency %.3f ms over %d queries", 1e3 * elapsed / len(queries), len(queries))
    log.info("wrote %s", out)
    return out


def cmd_eval(cfg: PipelineConfig, run_path=None, qrels_path=None) -> dict:
    art = Artifacts.of(cfg)
    run_path = Path(run_path) if run_path else art.run
    qrels_path = Path(qrels_path) if qrels_path else art.data_dir / "qrels.eval.tsv"
    _require(run_path, qrels_path)
    run = read_run(run_path)
    labels = read_qrels(qrels_path)
    if len(run) == 0:
        log.warning("run file %s is empty; every metric is 0", run_path)
    unknown = [q for q in run.rankings if q not in labels]
    if unknown:
        raise InvalidArgumentError(f"{run_path}: queries without relevance labels: {unknown[:5]}")
    # queries the run does not answer score zero
    missing = [q for q in labels if q not in run.rankings]
    if missing and len(run):
        log.warning("%d labeled queries are missing from the run and score 0", len(missing))
    full = RankedRun({q: run.rankings.get(q, []) for q in labels})
    report = evaluate_run(full, labels, cfg.ks, name=run_path.name)
    print(format_report(report))
    write_report_csv([report], run_path.with_suffix(".eval.csv"))
    return report.values


def time_per_query(search: Callable[[np.ndarray], object], queries: np.ndarray, warmup: int = 5) -> float:
    """Mean wall-clock seconds per query, after running ``warmup`` untimed queries."""
    for q in queries[:warmup]:
        search(q)
    timed = queries[warmup:]
    t0 = time.perf_counter()
    for q in timed:
        search(q)
    return (time.perf_counter() - t0) / len(timed)


def cmd_bench_latency(cfg: PipelineConfig, queries_path=None) -> dict:
    from threadpoolctl import threadpool_limits

    art = Artifacts.of(cfg)
    _require(art.doc_embeddings)
    cb, codes, _, Q = _load_search_inputs(cfg, queries_path)
    _, E = read_emb(art.doc_embeddings)
    total = cfg.latency_queries + cfg.warmup_queries
    Q = np.resize(Q.astype(np.float32), (total, Q.shape[1]))  # cycle when the set is small
    n = cfg.search_n
    with threadpool_limits(limits=1):
        adc = time_per_query(lambda q: search_table(build_lookup_table(cb, q), codes, n), Q,
                             cfg.warmup_queries)
        brute = time_per_query(lambda q: brute_force_search(E, q, n), Q, cfg.warmup_queries)
    print(f"adc_ms\t{1e3 * adc:.4f}")
    print(f"brute_force_ms\t{1e3 * brute:.4f}")
    print(f"speedup\t{brute / adc:.2f}")
    return {"adc_s": adc, "brute_force_s": brute}


def cmd_run_all(cfg: PipelineConfig, force: bool = False) -> dict:
    """gen-synthetic -> train-encoders -> build-index -> train-jpq -> search -> eval."""
    art = Artifacts.of(cfg)
    stages = [
        (art.data_dir / "qrels.eval.tsv", cmd_gen_synthetic),
        (art.doc_embeddings, cmd_train_encoders),
        (art.index, cmd_build_index),
        (art.jpq_index if cfg.search_index == "jpq" else None, cmd_train_jpq),
        (art.run, cmd_search),
    ]
    for output, fn in stages:
        if output is None:
            continue
        if output.exists() and not force:
            log.info("reusing %s", output)
            continue
        fn(cfg)
    return cmd_eval(cfg)


# --- entry point -------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jpq", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("overrides", nargs="*", metavar="key=value")
        return s

    add("gen-synthetic", "write a seeded synthetic dataset")
    add("train-encoders", "stage 1: train query and document encoders")
    add("build-index", "train OPQ and encode the corpus")
    add("train-jpq", "jointly train the query encoder and centroids")
    add("ablation", "evaluate the four ablation variants")
    s = add("search", "search the index and write a TSV run")
    s.add_argument("--queries", help="queries .emb file (default: eval split)")
    s.add_argument("--out", help="run file to write")
    s = add("eval", "score a run file against qrels")
    s.add_argument("--run", help="run TSV (default: the config's run)")
    s.add_argument("--qrels", help="qrels TSV (default: eval split)")
    s = add("bench-latency", "single-threaded ADC vs brute-force latency")
    s.add_argument("--queries", help="queries .emb file (default: eval split)")
    s = add("run-all", "run every stage, reusing existing artifacts")
    s.add_argument("--force", action="store_true", help="recompute existing artifacts")
    add("show-config", "print the resolved config")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = PipelineConfig.load(args.config, args.overrides)
        cmd = args.command
        if cmd == "gen-synthetic":
            cmd_gen_synthetic(cfg)
        elif cmd == "train-encoders":
            cmd_train_encoders(cfg)
        elif cmd == "build-index":
            cmd_build_index(cfg)
        elif cmd == "train-jpq":
            cmd_train_jpq(cfg)
        elif cmd == "ablation":
            cmd_ablation(cfg)
        elif cmd == "search":
            cmd_search(cfg, args.queries, args.out)
        elif cmd == "eval":
            cmd_eval(cfg, args.run, args.qrels)
        elif cmd == "bench-latency":
            cmd_bench_latency(cfg, args.queries)
        elif cmd == "run-all":
            cmd_run_all(cfg, args.force)
        elif cmd == "show-config":
            sys.stdout.write(cfg.to_text())
    except Exception as exc:  # one machine-parsable line per failure
        code = next((c for cls, c in EXIT_CODES.items() if isinstance(exc, cls)), 1)
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
