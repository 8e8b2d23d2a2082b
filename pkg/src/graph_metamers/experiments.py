"""Experiment protocols: train, synthesize, score, tabulate.

Every protocol expands into independent (cell, seed) jobs. Each finished job
is written atomically to ``<out>/cells/<key>.json`` and skipped on rerun, so
an interrupted experiment resumes where it stopped. Tables are assembled from
the cell files in job order, which keeps the CSV output byte-identical across
runs regardless of scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError, MetamerError
from .graph import Graph, SbmSpec, generate_sbm, load_graph, read_graph_json
from .jacobian import mean_rank
from .metrics import feature_report, structure_report
from .models import ARCHS, ModelConfig, Model, build_model, config_for_graph
from .synth import SynthConfig, metamer_graph, synthesize
from .training import TrainConfig, accuracy, train

EXPERIMENTS = ("feature-invariance", "structure-invariance", "mitigation", "layerwise",
               "cross-model", "width-sweep")
STRATEGIES = ("elu", "adversarial", "residual")


@dataclass
class ExperimentSpec:
    experiment: str
    dataset: dict = field(default_factory=lambda: {"sbm": {}})
    archs: list = field(default_factory=lambda: ["gcn"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    widths: list = field(default_factory=lambda: [16, 32, 64])
    target_layers: list | None = None
    wl_iterations: int = 3
    jacobian_nodes: int = 20
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        bad = [a for a in self.archs if a not in ARCHS]
        if bad or not self.archs:
            raise ConfigError(f"unknown or missing archs {bad}")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown mitigation strategies {bad}")
        if self.experiment == "cross-model" and len(self.archs) < 2:
            raise ConfigError("cross-model needs at least two archs")
        if self.experiment == "structure-invariance" and self.synth.mode != "structure":
            self.synth = SynthConfig(**{**asdict(self.synth), "mode": "structure"})

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown spec keys {sorted(unknown)}")
        try:
            if "synth" in doc:
                doc["synth"] = SynthConfig(**doc["synth"])
            if "train" in doc:
                doc["train"] = TrainConfig(**doc["train"])
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- datasets


def load_dataset(dataset: dict) -> Graph:
    """``{"sbm": {...}}``, ``{"graph": path.json}`` or ``{"edges", "features", "labels"}``."""
    if "sbm" in dataset:
        try:
            return generate_sbm(SbmSpec(**dataset["sbm"]))
        except TypeError as exc:
            raise ConfigError(f"bad sbm spec: {exc}") from exc
    if "graph" in dataset:
        return read_graph_json(dataset["graph"])
    if {"edges", "features", "labels"} <= set(dataset):
        return load_graph(dataset["edges"], dataset["features"], dataset["labels"],
                          header=bool(dataset.get("header", False)),
                          feature_kind=dataset.get("feature_kind"),
                          split_seed=int(dataset.get("split_seed", 0)))
    raise ConfigError(f"cannot interpret dataset {dataset!r}")


# ---------------------------------------------------------------- cell workers


def _feature_mode(graph: Graph, synth: SynthConfig) -> SynthConfig:
    if synth.mode == "structure":
        return synth
    mode = "feature-binary" if graph.feature_kind == "binary" else "feature-continuous"
    return SynthConfig(**{**asdict(synth), "mode": mode})


def _trained(graph, arch, seed, model_kw, train_cfg, features=None):
    cfg = config_for_graph(graph, **{**model_kw, "arch": arch, "seed": seed})
    return train(build_model(cfg), graph, train_cfg, features=features)


def _feature_cell(graph, arch, seed, model_kw, train_cfg, synth, layer=None, jacobian_nodes=0):
    trained = _trained(graph, arch, seed, model_kw, train_cfg)
    model = trained.model
    k = synth.target_layer if layer is None else layer
    synth = _feature_mode(graph, SynthConfig(**{**asdict(synth), "seed": seed, "target_layer": k}))
    res = synthesize(model, graph, synth)
    meta = metamer_graph(graph, res)
    rep = feature_report(graph.features, meta.features, model.forward(graph).predictions,
                         model.forward(meta).predictions)
    row = {**rep.to_dict(), "activation_similarity": res.activation_similarity,
           "final_loss": res.final_loss, "converged": res.converged, "test_acc": trained.test_acc}
    for key in ("s_struct", "cs_struct"):
        row.pop(key)
    if jacobian_nodes:
        nodes = np.random.default_rng(seed).choice(graph.n, size=min(jacobian_nodes, graph.n), replace=False)
        row["jacobian_rank"] = mean_rank(model, graph, sorted(int(v) for v in nodes))
    return row


def _structure_cell(graph, arch, seed, model_kw, train_cfg, synth, wl_iterations):
    trained = _trained(graph, arch, seed, model_kw, train_cfg)
    model = trained.model
    res = synthesize(model, graph, SynthConfig(**{**asdict(synth), "seed": seed, "mode": "structure"}))
    meta = metamer_graph(graph, res)
    rep = structure_report(graph.adjacency, meta.adjacency, model.forward(graph).predictions,
                           model.forward(meta).predictions, wl_iterations)
    return {"s_struct": rep.s_struct, "s_match": rep.s_match, "cs_struct": rep.cs_struct,
            "activation_similarity": res.activation_similarity, "final_loss": res.final_loss,
            "converged": res.converged, "test_acc": trained.test_acc}


def _metamer_features(graph, arch, seed, model_kw, train_cfg, synth):
    trained = _trained(graph, arch, seed, model_kw, train_cfg)
    synth = _feature_mode(graph, SynthConfig(**{**asdict(synth), "seed": seed}))
    res = synthesize(trained.model, graph, synth)
    return {"features": res.hard_output.tolist(), "activation_similarity": res.activation_similarity}


def _cross_cell(graph, target, seed, model_kw, train_cfg, features):
    trained = _trained(graph, target, seed, model_kw, train_cfg,
                       features=None if features is None else np.array(features))
    return {"test_acc": trained.test_acc, "train_acc": trained.train_acc}


def _strategy_settings(strategy, model_kw, train_cfg):
    model_kw = dict(model_kw)
    if strategy == "elu":
        model_kw["activation"] = "elu"
    elif strategy == "residual":
        model_kw["residual"] = True
    elif strategy == "adversarial":
        train_cfg = TrainConfig(**{**asdict(train_cfg), "adversarial": True})
    return model_kw, train_cfg


# ---------------------------------------------------------------- job planning


@dataclass
class Job:
    key: str
    cell: dict
    seed: int
    func: object
    kwargs: dict


def _slug(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", key)


def plan_jobs(spec: ExperimentSpec, graph: Graph, resolved: dict | None = None) -> list[Job]:
    """Expand a spec into jobs. ``resolved`` feeds phase-one outputs (cross-model)."""
    jobs = []
    base = dict(model_kw=spec.model, train_cfg=spec.train)
    exp = spec.experiment
    for arch in spec.archs:
        for seed in spec.seeds:
            if exp == "feature-invariance":
                jobs.append(Job(f"{arch}|seed={seed}", {"arch": arch}, seed, _feature_cell,
                                dict(arch=arch, seed=seed, synth=spec.synth, **base)))
            elif exp == "structure-invariance":
                jobs.append(Job(f"{arch}|seed={seed}", {"arch": arch}, seed, _structure_cell,
                                dict(arch=arch, seed=seed, synth=spec.synth,
                                     wl_iterations=spec.wl_iterations, **base)))
            elif exp == "mitigation":
                for strategy in ["baseline"] + list(spec.strategies):
                    mkw, tcfg = _strategy_settings(strategy, spec.model, spec.train)
                    jobs.append(Job(f"{strategy}|{arch}|seed={seed}", {"strategy": strategy, "arch": arch},
                                    seed, _feature_cell,
                                    dict(arch=arch, seed=seed, synth=spec.synth, model_kw=mkw, train_cfg=tcfg)))
            elif exp == "width-sweep":
                for width in spec.widths:
                    mkw = {**spec.model, "hidden_dim": int(width)}
                    jobs.append(Job(f"{arch}|width={width}|seed={seed}", {"arch": arch, "width": width},
                                    seed, _feature_cell,
                                    dict(arch=arch, seed=seed, synth=spec.synth, model_kw=mkw,
                                         train_cfg=spec.train, jacobian_nodes=spec.jacobian_nodes)))
            elif exp == "layerwise":
                depth = spec.model.get("layers", ModelConfig.layers)
                targets = spec.target_layers or list(range(1, max(depth - 1, 1) + 1))
                for k in targets:
                    if not 1 <= k <= depth:
                        raise ConfigError(f"target layer {k} outside 1..{depth}")
                    jobs.append(Job(f"{arch}|layer={k}|seed={seed}", {"arch": arch, "layer": k}, seed,
                                    _feature_cell,
                                    dict(arch=arch, seed=seed, synth=spec.synth, layer=k, **base)))
            elif exp == "cross-model":
                if resolved is None:
                    jobs.append(Job(f"metamer|{arch}|seed={seed}", {"source": arch}, seed, _metamer_features,
                                    dict(arch=arch, seed=seed, synth=spec.synth, **base)))
                else:
                    for source in ["original"] + list(spec.archs):
                        feats = None
                        if source != "original":
                            src = resolved.get(f"metamer|{source}|seed={seed}")
                            if src is None or "error" in src:
                                continue
                            feats = src["features"]
                        jobs.append(Job(f"{arch}|{source}|seed={seed}", {"target": arch, "source": source},
                                        seed, _cross_cell,
                                        dict(target=arch, seed=seed, features=feats, **base)))
    return jobs


def _run_one(func, graph, kwargs):
    try:
        return func(graph=graph, **kwargs)
    except MetamerError as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def execute(jobs: list[Job], graph: Graph, cell_dir: Path, workers: int = 1) -> dict:
    cell_dir.mkdir(parents=True, exist_ok=True)
    results, pending = {}, []
    for job in jobs:
        path = cell_dir / f"{_slug(job.key)}.json"
        if path.exists():
            results[job.key] = json.loads(path.read_text())
        else:
            pending.append((job, path))
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job, path, pool.submit(_run_one, job.func, graph, job.kwargs)) for job, path in pending]
            for job, path, fut in futures:
                results[job.key] = fut.result()
                _write_atomic(path, json.dumps(results[job.key]))
    else:
        for job, path in pending:
            results[job.key] = _run_one(job.func, graph, job.kwargs)
            _write_atomic(path, json.dumps(results[job.key]))
    return results


# ---------------------------------------------------------------- tables


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def build_rows(jobs: list[Job], results: dict) -> tuple[list[str], list[dict], list[dict]]:
    """Raw per-seed rows and one aggregate row per cell (mean/std over seeds)."""
    cell_keys = list(dict.fromkeys(k for job in jobs for k in job.cell))
    metrics = list(dict.fromkeys(m for job in jobs for m in results.get(job.key, {})
                                 if m not in ("error", "features")))
    raw, groups = [], {}
    for job in jobs:
        res = results[job.key]
        row = {**job.cell, "seed": job.seed, "status": "failed" if "error" in res else "ok",
               "error": res.get("error", "")}
        row.update({m: res.get(m) for m in metrics})
        raw.append(row)
        groups.setdefault(tuple(job.cell.get(k) for k in cell_keys), []).append(row)
    agg = []
    for cell, rows in groups.items():
        ok = [r for r in rows if r["status"] == "ok"]
        out = dict(zip(cell_keys, cell))
        out["n_ok"] = len(ok)
        out["n_failed"] = len(rows) - len(ok)
        for m in metrics:
            vals = [float(r[m]) for r in ok if r[m] is not None]
            out[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            out[f"{m}_std"] = float(np.std(vals)) if vals else None
        agg.append(out)
    return cell_keys, raw, agg


def _csv_text(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def derived_summaries(spec: ExperimentSpec, raw: list[dict]) -> dict:
    """Paired and trend statistics that need more than per-cell means."""
    ok = [r for r in raw if r["status"] == "ok"]
    out = {}
    if spec.experiment == "mitigation":
        base = {(r["arch"], r["seed"]): r["cs_feat"] for r in ok if r["strategy"] == "baseline"}
        deltas = {}
        for r in ok:
            if r["strategy"] != "baseline" and (r["arch"], r["seed"]) in base:
                deltas.setdefault(f'{r["strategy"]}|{r["arch"]}', []).append(
                    r["cs_feat"] - base[(r["arch"], r["seed"])])
        out["delta_cs_feat"] = {k: float(np.mean(v)) for k, v in deltas.items()}
    elif spec.experiment == "width-sweep":
        rho = {}
        for arch in spec.archs:
            for seed in spec.seeds:
                pts = sorted((int(r["width"]), r["cs_feat"]) for r in ok
                             if r["arch"] == arch and r["seed"] == seed)
                if len(pts) < 2:
                    continue
                cs = [p[1] for p in pts]
                # flat scores carry no rank information; count them as no trend
                val = 0.0 if len(set(cs)) == 1 else float(spearmanr([p[0] for p in pts], cs).statistic)
                rho[f"{arch}|seed={seed}"] = val
        out["spearman_width_cs_feat"] = rho
    elif spec.experiment == "layerwise":
        trend = {}
        for arch in spec.archs:
            for seed in spec.seeds:
                by_k = {int(r["layer"]): r["cs_feat"] for r in ok if r["arch"] == arch and r["seed"] == seed}
                if len(by_k) >= 2:
                    trend[f"{arch}|seed={seed}"] = by_k[max(by_k)] <= by_k[min(by_k)]
        out["deepest_not_above_first"] = trend
    return out


def run_experiment(spec: ExperimentSpec, out_dir, graph: Graph | None = None) -> dict:
    """Run (or resume) an experiment and write ``results.csv``, ``table.csv`` and ``summary.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MetamerError(f"cannot create {out}: {exc}") from exc
    graph = load_dataset(spec.dataset) if graph is None else graph
    cells = out / "cells"
    jobs = plan_jobs(spec, graph)
    results = execute(jobs, graph, cells, spec.workers)
    if spec.experiment == "cross-model":
        jobs = plan_jobs(spec, graph, resolved=results)
        results = execute(jobs, graph, cells, spec.workers)

    cell_keys, raw, agg = build_rows(jobs, results)
    metrics = [c for c in raw[0] if c not in cell_keys + ["seed", "status", "error"]] if raw else []
    raw_cols = cell_keys + ["row_type", "seed", "status", "error"] + metrics
    agg_rows = []
    for a in agg:
        for stat in ("mean", "std"):
            agg_rows.append({**{k: a[k] for k in cell_keys}, "row_type": stat, "status": f"n_ok={a['n_ok']}",
                             **{m: a[f"{m}_{stat}"] for m in metrics}})
    _write_atomic(out / "results.csv", _csv_text(raw_cols, [{**r, "row_type": "seed"} for r in raw] + agg_rows))
    table_cols = cell_keys + ["n_ok", "n_failed"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    _write_atomic(out / "table.csv", _csv_text(table_cols, agg))
    summary = {"spec": spec.to_dict(), "table": agg, "derived": derived_summaries(spec, raw)}
    _write_atomic(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_fmt))
    return {"raw": raw, "table": agg, "derived": summary["derived"]}


# thin per-protocol entry points


def run_feature_invariance(spec: ExperimentSpec, out_dir, graph=None) -> dict:
    return run_experiment(_as(spec, "feature-invariance"), out_dir, graph)


def run_structure_invariance(spec: ExperimentSpec, out_dir, graph=None) -> dict:
    return run_experiment(_as(spec, "structure-invariance"), out_dir, graph)


def run_mitigation(spec: ExperimentSpec, out_dir, graph=None) -> dict:
    return run_experiment(_as(spec, "mitigation"), out_dir, graph)


def run_width_sweep(spec: ExperimentSpec, out_dir, graph=None) -> dict:
    return run_experiment(_as(spec, "width-sweep"), out_dir, graph)


def run_layerwise(spec: ExperimentSpec, out_dir, graph=None) -> dict:
    return run_experiment(_as(spec, "layerwise"), out_dir, graph)


def run_cross_model(spec: ExperimentSpec, out_dir, graph=None) -> dict:
    return run_experiment(_as(spec, "cross-model"), out_dir, graph)


def _as(spec: ExperimentSpec, name: str) -> ExperimentSpec:
    if spec.experiment == name:
        return spec
    return ExperimentSpec.from_dict({**asdict(spec), "experiment": name,
                                     "synth": asdict(spec.synth), "train": asdict(spec.train)})
