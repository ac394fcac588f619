"""Desk-scale experiment drivers on synthetic corpora.

Each scenario returns a :class:`Report` holding table rows; ``records()``
flattens them into one ``{scenario, name, value, params}`` record per metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..ensemble import cluster_candidates
from ..errors import DataError
from ..model import MEVI
from .metrics import evaluate, parse_metric, recall_at_k
from .synthetic import SyntheticSpec, gen_synthetic

SCENARIOS = ("cluster-only", "ensemble", "dynamic-10pct", "rq-vs-kmeans", "rq-config-sweep")

DEFAULTS = {
    "synthetic": {},
    "m": 4,
    "b": 32,
    "seed": 0,
    "seeds": [0, 1, 2],
    "ks": [10, 100, 1000],
    "metrics": ["mrr@10", "recall@50", "recall@1000"],
    "metric": "ip",
    "dense": "hnsw",
    "top_k": 1000,
    "alpha": 0.5,
    "beta": 0.02,
    "missing_policy": "zero",
    "hnsw": {"M": 16, "ef_construction": 200, "ef_search": 64},
    "remove_fraction": 0.1,
    # (layers, bits per layer, clusters retrieved), the shape of the RQ configuration study
    "configs": [[3, 4, 3], [4, 4, 10], [4, 5, 100], [5, 4, 100], [5, 5, 1000]],
}


@dataclass
class Report:
    scenario: str
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, params: dict, metrics: dict) -> None:
        self.rows.append({"params": dict(params), "metrics": dict(metrics)})

    def records(self) -> list[dict]:
        return [
            {"scenario": self.scenario, "name": name, "value": value, "params": row["params"]}
            for row in self.rows
            for name, value in row["metrics"].items()
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def render(self) -> str:
        if not self.rows:
            return f"[{self.scenario}] (no rows)\n"
        pkeys = list(dict.fromkeys(k for r in self.rows for k in r["params"]))
        mkeys = list(dict.fromkeys(k for r in self.rows for k in r["metrics"]))
        header = pkeys + mkeys

        def fmt(v):
            if isinstance(v, float):
                return f"{v:.4f}"
            return "-" if v is None else str(v)

        table = [header] + [[fmt(r["params"].get(k)) for k in pkeys] + [fmt(r["metrics"].get(k)) for k in mkeys]
                            for r in self.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(header))]
        lines = [f"[{self.scenario}]"]
        for j, row in enumerate(table):
            lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _config(config: dict | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    for key, value in (config or {}).items():
        if key not in DEFAULTS:
            raise DataError(f"unknown config key {key!r}")
        if isinstance(value, dict) and isinstance(cfg[key], dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    for m in cfg["metrics"]:
        parse_metric(m)
    return cfg


def _model(cfg: dict, *, m=None, b=None, builder="rq", seed=None) -> MEVI:
    h = cfg["hnsw"]
    return MEVI(builder=builder, n_layers=m or cfg["m"], n_codewords=b or cfg["b"], metric=cfg["metric"],
                dense=cfg["dense"], hnsw_M=h["M"], ef_construction=h["ef_construction"],
                ef_search=h["ef_search"], top_k=cfg["top_k"], alpha=cfg["alpha"], beta=cfg["beta"],
                missing_policy=cfg["missing_policy"], random_state=cfg["seed"] if seed is None else seed)


def _corpus(cfg: dict, seed: int | None = None):
    spec = dict(cfg["synthetic"])
    if seed is not None:
        spec["seed"] = seed
    return gen_synthetic(SyntheticSpec(**spec))


def _cluster_eval(model: MEVI, queries, qrels, k: int, metrics) -> tuple[dict, dict]:
    """Cluster-only metrics plus candidate-set statistics (docs/query, recall of all candidates)."""
    run, cand_run, n_docs = {}, {}, []
    for qid, q in zip(queries.ids, queries.vectors):
        ranked = model.rank_clusters(q, k)
        ords, _ = cluster_candidates(model.index_, ranked)
        n_docs.append(len(ords))
        cand_run[qid] = model.external_ids(ords)
        res = model.search(q, "clusters", k=k, ranked=ranked)
        run[qid] = model.external_ids(res.ordinals)
    out = {key: v for key, v in evaluate(run, qrels, metrics).items() if "@" in key}
    out["recall@clusters"] = recall_at_k(cand_run, qrels, max(1, max(len(v) for v in cand_run.values())))
    out["docs_per_query"] = float(np.mean(n_docs))
    return out, run


def _mode_eval(model: MEVI, queries, qrels, mode: str, metrics, **kw) -> dict:
    run = model.run(queries.vectors, queries.ids, mode, **kw)
    return {key: v for key, v in evaluate(run, qrels, metrics).items() if "@" in key}


def _cluster_only(cfg: dict) -> Report:
    docs, queries, qrels = _corpus(cfg)
    model = _model(cfg).fit(docs.vectors, docs.ids)
    rep = Report("cluster-only")
    for mode in ("exact", "hnsw"):
        rep.add({"method": f"dense-{mode}", "k": None}, _mode_eval(model, queries, qrels, mode, cfg["metrics"]))
    for k in cfg["ks"]:
        metrics, _ = _cluster_eval(model, queries, qrels, k, cfg["metrics"])
        rep.add({"method": "clusters", "k": k}, metrics)
    rep.notes.append(f"non-empty clusters: {model.index_.n_clusters} of {model.codebook_.n_clusters}")
    return rep


def _ensemble(cfg: dict) -> Report:
    docs, queries, qrels = _corpus(cfg)
    model = _model(cfg).fit(docs.vectors, docs.ids)
    rep = Report("ensemble")
    rep.add({"method": f"dense-{cfg['dense']}", "k": None},
            _mode_eval(model, queries, qrels, cfg["dense"], cfg["metrics"]))
    for k in cfg["ks"]:
        metrics, _ = _cluster_eval(model, queries, qrels, k, cfg["metrics"])
        rep.add({"method": "clusters", "k": k}, metrics)
        rep.add({"method": f"clusters+{cfg['dense']}", "k": k},
                _mode_eval(model, queries, qrels, "ensemble", cfg["metrics"], k=k))
    return rep


def _dynamic(cfg: dict) -> Report:
    docs, queries, qrels = _corpus(cfg)
    rng = np.random.default_rng(cfg["seed"])
    n = docs.count
    n_out = max(1, int(round(cfg["remove_fraction"] * n)))
    perm = rng.permutation(n)
    held_out, kept = np.sort(perm[:n_out]), np.sort(perm[n_out:])

    full = _model(cfg).fit(docs.vectors, docs.ids)
    dyn = _model(cfg).fit(docs.vectors[kept], [docs.ids[i] for i in kept])
    for i in held_out:
        dyn.add_document(docs.ids[i], docs.vectors[i])

    rep = Report("dynamic-10pct")
    dense = cfg["dense"]
    base = _mode_eval(full, queries, qrels, dense, cfg["metrics"])
    after = _mode_eval(dyn, queries, qrels, dense, cfg["metrics"])
    rep.add({"method": f"dense-{dense}", "k": None, "build": "90%+add"},
            {**after, **{f"drop:{key}": base[key] - after[key] for key in base}})
    held_ids = {docs.ids[i] for i in held_out}
    for k in cfg["ks"]:
        b_metrics, _ = _cluster_eval(full, queries, qrels, k, cfg["metrics"])
        d_metrics, d_run = _cluster_eval(dyn, queries, qrels, k, cfg["metrics"])
        row = {key: d_metrics[key] for key in d_metrics}
        row.update({f"drop:{key}": b_metrics[key] - d_metrics[key]
                    for key in b_metrics if key != "docs_per_query"})
        targeted = {q: rel for q, rel in qrels.items() if rel & held_ids}
        if targeted:
            row["readded_recall@100"] = recall_at_k({q: d_run[q] for q in targeted}, targeted, 100)
        rep.add({"method": "clusters", "k": k, "build": "90%+add"}, row)
    hits = 0
    for i in held_out:
        top = dyn.search(docs.vectors[i], "exact", K=1)
        hits += int(dyn.external_ids(top.ordinals)[0] == docs.ids[i])
    rep.notes.append(f"re-added documents found at rank 1 by exact search: {hits}/{len(held_out)}")
    rep.add({"method": "readded-self-retrieval", "k": None, "build": "90%+add"},
            {"rank1_fraction": hits / len(held_out)})
    return rep


def _rq_vs_kmeans(cfg: dict) -> Report:
    rep = Report("rq-vs-kmeans")
    for seed in cfg["seeds"]:
        docs, queries, qrels = _corpus(cfg, seed)
        for builder in ("rq", "hkmeans"):
            model = _model(cfg, builder=builder, seed=seed).fit(docs.vectors, docs.ids)
            for k in cfg["ks"]:
                metrics, _ = _cluster_eval(model, queries, qrels, k, cfg["metrics"])
                metrics["nonempty_clusters"] = model.index_.n_clusters
                rep.add({"builder": builder, "seed": seed, "m": cfg["m"], "b": cfg["b"], "k": k,
                         "code_space": model.codebook_.n_clusters}, metrics)
    return rep


def _rq_sweep(cfg: dict) -> Report:
    docs, queries, qrels = _corpus(cfg)
    rep = Report("rq-config-sweep")
    metrics = ["mrr@10", "recall@100"]
    for m, bits, k in cfg["configs"]:
        model = _model(cfg, m=m, b=2**bits).fit(docs.vectors, docs.ids)
        out, _ = _cluster_eval(model, queries, qrels, k, metrics)
        out["nonempty_clusters"] = model.index_.n_clusters
        rep.add({"config": f"RQ({m}x{bits})", "k": k, "code_space": 2 ** (m * bits)}, out)
    return rep


_DRIVERS = {
    "cluster-only": _cluster_only,
    "ensemble": _ensemble,
    "dynamic-10pct": _dynamic,
    "rq-vs-kmeans": _rq_vs_kmeans,
    "rq-config-sweep": _rq_sweep,
}


def run_experiment(scenario: str, config: dict | None = None) -> Report:
    if scenario not in _DRIVERS:
        raise DataError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return _DRIVERS[scenario](_config(config))
