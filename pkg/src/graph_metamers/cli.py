"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure or
divergence, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigError, FormatError, MetamerError
from .experiments import ExperimentSpec, load_dataset, run_experiment
from .graph import SbmSpec, generate_sbm, read_graph_json, save_graph
from .jacobian import analyze_node
from .metrics import feature_report, structure_report
from .models import Model, build_model, config_for_graph
from .synth import SynthConfig, metamer_graph, synthesize
from .training import TrainConfig, train

MODE_ALIASES = {"feat-bin": "feature-binary", "feat-cont": "feature-continuous", "struct": "structure"}


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create {out}: {exc}") from exc
    return out


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _build(cls, doc: dict | None, what: str):
    try:
        return cls(**(doc or {}))
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc


def _load_graph(path):
    return read_graph_json(path)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> None:
    spec = _build(SbmSpec, _read_json(args.config) if args.config else {"seed": args.seed}, "sbm")
    out = Path(args.out)
    _out_dir(out.parent)
    save_graph(generate_sbm(spec), out)


def cmd_train(args) -> None:
    doc = _read_json(args.config)
    unknown = set(doc) - {"dataset", "model", "train"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    graph = load_dataset(doc.get("dataset", {"sbm": {}}))
    model_cfg = config_for_graph(graph, **doc.get("model", {}))
    train_cfg = _build(TrainConfig, doc.get("train"), "train")
    out = _out_dir(args.out)
    result = train(build_model(model_cfg), graph, train_cfg)
    result.model.save(out / "model.json")
    result.write_log(out / "train_log.csv")
    save_graph(graph, out / "graph.json")
    _dump(out / "metrics.json", {"train_acc": result.train_acc, "test_acc": result.test_acc,
                                 "final_loss": result.loss_curve[-1] if result.loss_curve else None,
                                 "config": {"model": asdict(model_cfg), "train": asdict(train_cfg)}})
    print(f"train_acc={result.train_acc:.4f} test_acc={result.test_acc:.4f}")


def cmd_metamer(args) -> None:
    model = Model.load(args.model)
    graph = _load_graph(args.graph)
    config = SynthConfig(mode=MODE_ALIASES[args.mode], target_layer=args.layer, steps=args.steps,
                         lr=args.lr, seed=args.seed, lambda_reg=args.lambda_reg,
                         rho_init="auto" if args.rho is None else args.rho)
    out = _out_dir(args.out)
    result = synthesize(model, graph, config)
    meta = metamer_graph(graph, result)
    y, y_meta = model.forward(graph).predictions, model.forward(meta).predictions
    if config.mode == "structure":
        report = structure_report(graph.adjacency, meta.adjacency, y, y_meta, args.wl_iterations)
    else:
        report = feature_report(graph.features, meta.features, y, y_meta)
    result.save(out / "metamer.json")
    _dump(out / "report.json", {**report.to_dict(), "activation_similarity": result.activation_similarity,
                                "final_loss": result.final_loss, "converged": result.converged,
                                "steps_run": result.steps_run, "config": asdict(config)})
    print(json.dumps(report.to_dict()))


def _parse_nodes(text: str) -> list[int]:
    nodes = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            nodes.extend(range(int(lo), int(hi) + 1))
        else:
            nodes.append(int(part))
    if not nodes:
        raise ConfigError("no nodes given")
    return nodes


def cmd_analyze(args) -> None:
    model = Model.load(args.model)
    graph = _load_graph(args.graph)
    try:
        nodes = _parse_nodes(args.nodes)
    except ValueError as exc:
        raise ConfigError(f"bad node list {args.nodes!r}") from exc
    if any(not 0 <= v < graph.n for v in nodes):
        raise ConfigError(f"node ids must lie in 0..{graph.n - 1}")
    reports = [analyze_node(model, graph, v, args.variant, args.rel_tol) for v in nodes]
    if args.out is None:
        print(json.dumps(reports))
        return
    out = _out_dir(args.out)
    _dump(out / "nodes.json", reports)
    with open(out / "ranks.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node", "rank", "local_metamer_dim", "sigma_max", "sigma_min"])
        for r in reports:
            sv = r["singular_values"]
            writer.writerow([r["node"], r["rank"], r["local_metamer_dim"], repr(sv[0]), repr(sv[-1])])


def cmd_experiment(args) -> None:
    spec = ExperimentSpec.from_dict(_read_json(args.spec))
    if args.workers is not None:
        spec.workers = args.workers
    result = run_experiment(spec, _out_dir(args.out))
    print(json.dumps(result["derived"], sort_keys=True))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graph-metamers", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a stochastic block model graph as JSON")
    p.add_argument("--config", help="JSON object of SbmSpec fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metamer", help="synthesize a metamer for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--mode", choices=sorted(MODE_ALIASES), required=True)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--steps", type=int, default=SynthConfig.steps)
    p.add_argument("--lr", type=float, default=SynthConfig.lr)
    p.add_argument("--lambda-reg", type=float, default=SynthConfig.lambda_reg)
    p.add_argument("--rho", type=float, default=None, help="keep fraction (default: match the reference)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wl-iterations", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metamer)

    p = sub.add_parser("analyze", help="per-node Jacobian rank and activation volume")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--nodes", required=True, help="comma list with ranges, e.g. 0,3,10-14")
    p.add_argument("--variant", choices=["aggregation", "concat", "node"], default="aggregation")
    p.add_argument("--rel-tol", type=float, default=1e-8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("experiment", help="run or resume an experiment spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except MetamerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
