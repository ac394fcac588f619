"""Batch command-line front end: ``mevi <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .cluster_search import load_external_rankings
from .ensemble import DEFAULT_ALPHAS, DEFAULT_BETAS, MISSING_POLICIES
from .errors import DataError, MeviError
from .eval.bench import bench_latency, mevi_pipeline
from .eval.experiments import SCENARIOS, run_experiment
from .eval.metrics import evaluate, parse_metric, parse_metrics
from .eval.synthetic import SyntheticSpec, gen_synthetic
from .eval.trec import read_qrels, read_run, write_qrels, write_run
from .model import MEVI, MODES
from .store import (
    bundle_lock,
    load_model,
    read_embeddings,
    read_id_list,
    save_model,
    write_embeddings,
    write_id_list,
)

log = logging.getLogger("mevi")


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _float_list(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("expected a non-empty list of values >= 0")
    return values


def _metric_list(text: str):
    try:
        specs = parse_metrics(text)
    except DataError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not specs:
        raise argparse.ArgumentTypeError("empty metric list")
    return specs


def _metric(text: str):
    try:
        return parse_metric(text)
    except DataError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _write_text(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _queries(args):
    Q = read_embeddings(args.queries)
    qids = read_id_list(args.qids) if args.qids else [str(i) for i in range(len(Q))]
    if len(qids) != len(Q):
        raise DataError(f"{len(qids)} query ids for {len(Q)} query embeddings")
    return Q, qids


def _rankings(args, model, qids):
    if not getattr(args, "rankings", None):
        return None
    table = load_external_rankings(args.rankings, model.codebook_.m, model.codebook_.b)
    missing = [q for q in qids if q not in table]
    if missing:
        raise DataError(f"external rankings lack query {missing[0]!r}")
    return [table[q] for q in qids]


def _search_kw(args) -> dict:
    return {"k": args.k, "K": args.topk, "alpha": args.alpha, "beta": args.beta,
            "missing_policy": args.missing, "ef_search": args.ef, "beam_width": args.beam,
            "dense_depth": args.dense_depth}


# -- subcommands ------------------------------------------------------------


def cmd_build(args) -> int:
    X = read_embeddings(args.embeddings)
    ids = read_id_list(args.ids) if args.ids else None
    model = MEVI(builder=args.builder, n_layers=args.m, n_codewords=args.b, metric=args.metric,
                 dense="exact", hnsw_M=args.hnsw_m, ef_construction=args.ef_construction,
                 ef_search=args.ef_search, max_iter=args.max_iter, tol=args.tol, random_state=args.seed)
    model.fit(X, ids)
    # the HNSW graph is not persisted; it is rebuilt when a bundle is loaded
    model.dense = args.dense
    manifest = save_model(args.out, model)
    log.info("per-layer SSE: %s", model.report_.per_layer_sse)
    print(f"built {args.out}: {manifest['n_rows']} documents, {manifest['nonempty_clusters']} non-empty "
          f"of {manifest['possible_clusters']} possible clusters")
    return 0


def cmd_search(args) -> int:
    if args.mode in ("exact", "hnsw") and args.rankings:
        raise DataError("--rankings only applies to the clusters and ensemble modes")
    dense = "exact" if args.mode in ("exact", "clusters") else None
    model = load_model(args.bundle, dense=dense)
    Q, qids = _queries(args)
    rankings = _rankings(args, model, qids)
    results = model.search_batch(Q, args.mode, rankings=rankings, threads=args.threads, **_search_kw(args))
    run = {q: list(zip(model.external_ids(r.ordinals), r.scores.tolist())) for q, r in zip(qids, results)}
    write_run(args.run, run, tag=f"mevi-{args.mode}")
    print(f"wrote {args.run}: {len(run)} queries")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(read_run(args.run), read_qrels(args.qrels), args.metrics)
    for key, value in report.items():
        print(f"{key}\t{value:.6f}" if isinstance(value, float) else f"{key}\t{value}")
    if args.out:
        _write_text(args.out, "".join(json.dumps({"name": k, "value": v, "params": {"run": args.run}},
                                                 sort_keys=True) + "\n" for k, v in report.items()))
    return 0


def cmd_update(args) -> int:
    with bundle_lock(args.bundle):
        model = load_model(args.bundle, dense="exact")
        if args.action == "add":
            X = read_embeddings(args.embeddings)
            ids = read_id_list(args.ids)
            if len(ids) != len(X):
                raise DataError(f"{len(ids)} ids for {len(X)} embeddings")
            clash = [i for i in ids if i in model.id_to_ordinal_]
            if clash or len(set(ids)) != len(ids):
                raise DataError(f"duplicate id {(clash or ids)[0]!r}")
            for doc_id, v in zip(ids, X):
                model.add_document(doc_id, v)
        else:
            ids = read_id_list(args.ids)
            unknown = [i for i in ids if i not in model.id_to_ordinal_]
            if unknown:
                raise DataError(f"unknown id {unknown[0]!r}")
            for doc_id in ids:
                model.remove_document(doc_id)
            if args.compact:
                model.compact()
        model.dense = model.manifest_.get("param.dense", model.dense)
        manifest = save_model(args.bundle, model)
    print(f"updated {args.bundle}: {manifest['live_count']} live of {manifest['n_rows']} rows")
    return 0


def cmd_grid(args) -> int:
    model = load_model(args.bundle)
    Q, qids = _queries(args)
    qrels = read_qrels(args.qrels)
    a, b, value, table = model.grid_search(Q, qids, qrels, args.alphas, args.betas, str(args.target),
                                           k=args.k, K=args.topk, rankings=_rankings(args, model, qids),
                                           missing_policy=args.missing)
    lines = ["alpha\tbeta\t" + str(args.target)] + [f"{r['alpha']:g}\t{r['beta']:g}\t{r['value']:.6f}" for r in table]
    print("\n".join(lines))
    print(f"best\talpha={a:g}\tbeta={b:g}\t{args.target}={value:.6f}")
    if args.out:
        _write_text(args.out, "".join(json.dumps({"name": str(args.target), "value": r["value"],
                                                  "params": {"alpha": r["alpha"], "beta": r["beta"]}},
                                                 sort_keys=True) + "\n" for r in table))
    return 0


def cmd_bench(args) -> int:
    dense = None if args.mode in ("hnsw", "ensemble") else "exact"
    model = load_model(args.bundle, dense=dense)
    Q, _ = _queries(args)
    pipeline = mevi_pipeline(model, args.mode, **_search_kw(args))
    report = bench_latency(pipeline, Q, warmup=args.warmup, iters=args.iters)
    text = json.dumps({"mode": args.mode, **report.as_dict()}, indent=2, sort_keys=True)
    print(text)
    if args.out:
        _write_text(args.out, text + "\n")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_docs=args.n, dim=args.dim, n_clusters_true=args.clusters, noise_sigma=args.sigma,
                         n_queries=args.queries, seed=args.seed, cluster_spread=args.spread)
    docs, queries, qrels = gen_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "docs.emb", docs.vectors)
    write_id_list(out / "docs.ids", docs.ids)
    write_embeddings(out / "queries.emb", queries.vectors)
    write_id_list(out / "queries.ids", queries.ids)
    tmp = out / f"qrels.txt.tmp{os.getpid()}"
    write_qrels(tmp, qrels)
    os.replace(tmp, out / "qrels.txt")
    print(f"wrote {out}: docs.emb docs.ids queries.emb queries.ids qrels.txt")
    return 0


def cmd_experiment(args) -> int:
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{args.config}: {exc}") from None
        if not isinstance(config, dict):
            raise DataError(f"{args.config}: expected a JSON object")
    config.setdefault("seed", args.seed)
    report = run_experiment(args.scenario, config)
    print(report.render(), end="")
    if args.out:
        _write_text(args.out, report.to_jsonl())
    return 0


# -- parser -----------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Appends ``(default: ...)`` unless the flag is required or its help already names a default."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required or "default" in text:
            return text
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    top = argparse.ArgumentParser(add_help=False)
    top.add_argument("--seed", type=int, default=0, help="random seed for every stochastic step")
    top.add_argument("--threads", type=_positive, default=1, help="worker threads for query batches")
    top.add_argument("--verbose", "-v", action="count", default=0, help="log progress (repeat for debug)")
    # the same flags after the subcommand; SUPPRESS keeps them from clobbering values given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default: 0)")
    common.add_argument("--threads", type=_positive, default=argparse.SUPPRESS,
                        help="worker threads for query batches (default: 1)")
    common.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS,
                        help="log progress, repeat for debug (default: off)")

    parser = argparse.ArgumentParser(prog="mevi", description="Model-enhanced vector index.",
                                     formatter_class=fmt, parents=[top])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt,
                              parents=[common], argument_default=None)

    def search_flags(p, with_ranking_flags=True):
        p.add_argument("--k", type=_positive, default=100, help="clusters retrieved per query")
        p.add_argument("--topk", type=_positive, default=1000, help="documents returned per query (K)")
        p.add_argument("--dense-depth", type=_positive, default=None, help="dense candidates fused (K'; default K)")
        p.add_argument("--ef", type=_positive, default=None, help="HNSW ef_search (default: bundle setting)")
        p.add_argument("--beam", type=_positive, default=None, help="beam width (default max(k, 100))")
        if with_ranking_flags:
            p.add_argument("--alpha", type=_nonneg_float, default=None, help="cluster score weight (default 0.5)")
            p.add_argument("--beta", type=_nonneg_float, default=None, help="rank decay (default 0.02)")
        p.add_argument("--missing", choices=MISSING_POLICIES, default=None,
                       help="cluster score of documents outside the ranked clusters (default zero)")
        p.add_argument("--rankings", default=None, help="external cluster rankings TSV with columns qid, code, rank, score (default: beam search)")

    p = add("build", "Cluster a corpus and write an index bundle.")
    p.add_argument("--embeddings", required=True, help="document embeddings (MEVIEMB1)")
    p.add_argument("--ids", default=None, help="document ids, one per line (default: row numbers)")
    p.add_argument("--m", type=_positive, default=4, help="code layers")
    p.add_argument("--b", type=_positive, default=32, help="codewords per layer")
    p.add_argument("--builder", choices=("rq", "hkmeans"), default="rq", help="clustering method")
    p.add_argument("--metric", choices=("ip", "cosine", "l2"), default="ip", help="retrieval similarity")
    p.add_argument("--dense", choices=("hnsw", "exact"), default="hnsw", help="dense backend for ensemble search")
    p.add_argument("--hnsw-m", type=_positive, default=16, help="HNSW neighbours per node")
    p.add_argument("--ef-construction", type=_positive, default=200, help="HNSW build beam")
    p.add_argument("--ef-search", type=_positive, default=64, help="HNSW search beam stored in the bundle")
    p.add_argument("--max-iter", type=_positive, default=50, help="k-means iterations per layer")
    p.add_argument("--tol", type=_nonneg_float, default=1e-4, help="k-means centroid movement tolerance")
    p.add_argument("--out", required=True, help="bundle directory")
    p.set_defaults(func=cmd_build)

    p = add("search", "Search a bundle and write a TREC run file.")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--queries", required=True, help="query embeddings (MEVIEMB1)")
    p.add_argument("--qids", default=None, help="query ids, one per line (default: row numbers)")
    p.add_argument("--mode", choices=MODES, default="ensemble", help="retrieval mode")
    search_flags(p)
    p.add_argument("--run", required=True, help="output run file")
    p.set_defaults(func=cmd_search)

    p = add("eval", "Score a run file against qrels.")
    p.add_argument("--run", required=True, help="TREC run file")
    p.add_argument("--qrels", required=True, help="TREC qrels file")
    p.add_argument("--metrics", type=_metric_list, default="mrr@10,recall@50,recall@1000",
                   help="comma-separated name@K tokens (recall, mrr)")
    p.add_argument("--out", default=None, help="also write JSON lines here (default: stdout only)")
    p.set_defaults(func=cmd_eval)

    p = add("update", "Add or remove documents in a bundle (written atomically).")
    p.add_argument("--bundle", required=True, help="bundle directory")
    actions = p.add_subparsers(dest="action", required=True, metavar="ACTION")
    pa = actions.add_parser("add", help="encode and insert new documents", formatter_class=fmt)
    pa.add_argument("--embeddings", required=True, help="new document embeddings (MEVIEMB1)")
    pa.add_argument("--ids", required=True, help="ids of the new documents")
    pr = actions.add_parser("remove", help="tombstone documents by id", formatter_class=fmt)
    pr.add_argument("--ids", required=True, help="ids to remove")
    pr.add_argument("--compact", action="store_true", help="drop tombstoned rows and renumber")
    p.set_defaults(func=cmd_update)

    p = add("grid", "Grid-search the fusion weights alpha and beta.")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--queries", required=True, help="query embeddings (MEVIEMB1)")
    p.add_argument("--qids", default=None, help="query ids, one per line (default: row numbers)")
    p.add_argument("--qrels", required=True, help="TREC qrels file")
    p.add_argument("--alphas", type=_float_list, default=",".join(f"{a:g}" for a in DEFAULT_ALPHAS),
                   help="alpha values")
    p.add_argument("--betas", type=_float_list, default=",".join(f"{b:g}" for b in DEFAULT_BETAS),
                   help="beta values")
    p.add_argument("--target", type=_metric, default="mrr@10", help="metric to maximise")
    p.add_argument("--k", type=_positive, default=None, help="clusters retrieved per query (default: bundle)")
    p.add_argument("--topk", type=_positive, default=None, help="documents returned per query (default: bundle)")
    p.add_argument("--missing", choices=MISSING_POLICIES, default=None, help="missing-cluster policy (default: bundle setting)")
    p.add_argument("--rankings", default=None, help="external cluster rankings TSV (default: beam search)")
    p.add_argument("--out", default=None, help="also write the table as JSON lines (default: stdout only)")
    p.set_defaults(func=cmd_grid)

    p = add("bench", "Measure per-query latency.")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--queries", required=True, help="query embeddings (MEVIEMB1)")
    p.add_argument("--qids", default=None, help="query ids, accepted for symmetry with search (default: ignored)")
    p.add_argument("--mode", choices=MODES, default="ensemble", help="retrieval mode")
    p.add_argument("--iters", type=_positive, default=1, help="timed passes over the queries")
    p.add_argument("--warmup", type=int, default=1, help="untimed passes first")
    search_flags(p)
    p.add_argument("--out", default=None, help="also write the JSON report here (default: stdout only)")
    p.set_defaults(func=cmd_bench)

    p = add("synth", "Generate a synthetic corpus, queries and qrels.")
    p.add_argument("--n", type=_positive, default=10_000, help="documents")
    p.add_argument("--dim", type=_positive, default=32, help="embedding dimension")
    p.add_argument("--clusters", type=_positive, default=64, help="true topic clusters")
    p.add_argument("--sigma", type=_nonneg_float, default=0.1, help="query noise std")
    p.add_argument("--spread", type=_nonneg_float, default=0.25, help="document spread around a topic")
    p.add_argument("--queries", type=_positive, default=500, help="queries")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = add("experiment", "Run a canned experiment on synthetic data.")
    p.add_argument("--scenario", choices=SCENARIOS, required=True, help="experiment to run")
    p.add_argument("--config", default=None, help="JSON object overriding the scenario defaults")
    p.add_argument("--out", default=None, help="write JSON-lines records here (default: stdout table only)")
    p.set_defaults(func=cmd_experiment)
    return parser


def _validate(args, parser) -> None:
    """Flag combinations that argparse cannot express."""
    if getattr(args, "func", None) in (cmd_search, cmd_bench):
        if args.mode in ("exact", "hnsw", "clusters") and (args.alpha is not None or args.beta is not None):
            parser.error(f"--alpha/--beta only apply to --mode ensemble, not {args.mode}")
    if getattr(args, "func", None) is cmd_bench and args.warmup < 0:
        parser.error("--warmup must be >= 0")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(args, parser)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MeviError as exc:
        print(f"mevi: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mevi: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic with the runtime exit code
        log.debug("unhandled error", exc_info=True)
        print(f"mevi: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return MeviError.exit_code


if __name__ == "__main__":
    sys.exit(main())
