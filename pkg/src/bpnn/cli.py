"""Command-line front end: dataset generation, estimation, training, eval.

One binary with subcommands; every random choice sits behind an explicit
--seed, so rerunning a command with the same flags produces byte-identical
artifacts (wall-clock fields are informational only).  Exit codes: 0 on
success, 1 on input errors, 2 on internal failures.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import generators, propagation as prop, training
from .exact import brute_force_model_count, variable_elimination_ln_z
from .generators import DimacsError
from .graphs import FactorGraphError, graph_to_dict, load_graph_json
from .layers import BpnnModel, load_checkpoint, save_checkpoint
from .propagation import BpConfig, bethe_ln_z, run_bp
from .training import LabeledInstance, TrainConfig, train

INPUT_ERRORS = (FactorGraphError, DimacsError, FileNotFoundError, IsADirectoryError,
                NotADirectoryError, PermissionError, json.JSONDecodeError,
                ValueError, KeyError, OSError)


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; remap to the input-error code
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _write_json(payload, path: str | None) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _worker_count() -> int:
    env = os.environ.get("BPNN_THREADS", "").strip()
    if env:
        count = int(env)
        if count < 1:
            raise ValueError("BPNN_THREADS must be a positive integer")
        return count
    return min(8, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _label_ln_z(graph) -> float | None:
    try:
        return variable_elimination_ln_z(graph).ln_z
    except ValueError:
        return None


def cmd_generate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    warnings = 0

    def emit(name: str, graph, ln_z, tag: str) -> None:
        nonlocal warnings
        path = out_dir / f"{name}.json"
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(graph_to_dict(graph), handle, indent=1)
            handle.write("\n")
        if ln_z is None:
            warnings += 1
            print(f"warning: {name}: exact label exceeds oracle caps, left unlabeled",
                  file=sys.stderr)
        entries.append({"path": path.name, "ln_z": ln_z, "tag": tag})

    seeds = np.random.SeedSequence(args.seed).spawn(max(args.count, 0))
    if args.family == "ising":
        for i in range(args.count):
            graph = generators.sample_ising_grid(args.grid_n, args.f_max, args.c_max,
                                                 seeds[i])
            emit(f"ising_{i:04d}", graph, _label_ln_z(graph), f"ising{args.grid_n}")
    elif args.family == "sbm":
        class_probs = [float(x) for x in args.class_probs.split(",")]
        if len(class_probs) != args.classes:
            raise ValueError(f"--class-probs lists {len(class_probs)} values "
                             f"for {args.classes} classes")
        edge_probs = np.full((args.classes, args.classes), args.p_out)
        np.fill_diagonal(edge_probs, args.p_in)
        for i in range(args.count):
            sample = generators.sample_sbm(args.nodes, class_probs, edge_probs, seeds[i])
            emit(f"sbm_{i:04d}", sample.graph, _label_ln_z(sample.graph),
                 f"sbm{args.nodes}")
    else:  # cnf-dataset
        if not args.cnf_dir:
            raise ValueError("--cnf-dir is required for --family cnf-dataset")
        paths = sorted(Path(args.cnf_dir).glob("*.cnf"))
        if not paths:
            raise ValueError(f"no .cnf files under {args.cnf_dir}")
        for i, cnf_path in enumerate(paths):
            cnf = generators.parse_dimacs(cnf_path.read_text(encoding="utf-8"))
            graph = generators.cnf_to_factor_graph(cnf, max_arity=args.max_arity)
            ln_z = None
            if cnf.n_vars <= args.label_cap_vars:
                count = brute_force_model_count(cnf)
                ln_z = math.log(count) if count > 0 else float("-inf")
            emit(f"cnf_{i:04d}_{cnf_path.stem}", graph, ln_z, "cnf")

    manifest = {
        "command": "generate",
        "family": args.family,
        "seed": args.seed,
        "parameters": {k: getattr(args, k) for k in
                       ("count", "grid_n", "f_max", "c_max", "nodes", "classes",
                        "class_probs", "p_in", "p_out", "cnf_dir", "label_cap_vars",
                        "max_arity")},
        "instances": entries,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=1, sort_keys=True)
        handle.write("\n")
    print(f"wrote {len(entries)} graphs to {out_dir} ({warnings} unlabeled)")
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _collect_graph_paths(args) -> list[Path]:
    paths: list[Path] = []
    if args.manifest:
        manifest_path = Path(args.manifest)
        entries = training.load_manifest_entries(manifest_path)
        for entry in entries:
            graph_path = Path(entry["path"])
            paths.append(graph_path if graph_path.is_absolute()
                         else manifest_path.parent / graph_path)
    paths.extend(Path(p) for p in args.graphs or [])
    if not paths:
        raise ValueError("no input graphs: pass --manifest and/or --graphs")
    return paths


def _estimate_one(path: Path, args, model: BpnnModel | None) -> dict:
    graph = load_graph_json(path)
    start = time.perf_counter()
    if args.method == "exact":
        result = variable_elimination_ln_z(graph)
        record = {"ln_z_estimate": result.ln_z, "converged": True, "iterations": 0}
    elif args.method == "bp":
        config = BpConfig(alpha=args.alpha, tol=args.tol,
                          max_iters=args.max_iters, schedule=args.schedule)
        config.validate()
        result = run_bp(graph, config)
        record = {"ln_z_estimate": bethe_ln_z(graph, result.messages),
                  "converged": result.converged, "iterations": result.iterations_run}
    else:
        estimate, _, _ = model.forward(graph, None, args.iters)
        record = {"ln_z_estimate": float(estimate.value), "converged": None,
                  "iterations": len(model.iteration_layers(args.iters))}
    record["instance"] = str(path)
    record["wall_ms"] = (time.perf_counter() - start) * 1000.0
    return record


def cmd_estimate(args) -> int:
    paths = _collect_graph_paths(args)
    model = None
    if args.method == "bpnn":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for --method bpnn")
        model = load_checkpoint(args.checkpoint)
    elif args.checkpoint:
        raise ValueError("--checkpoint only applies to --method bpnn")

    workers = _worker_count()
    if workers == 1 or len(paths) == 1:
        records = [_estimate_one(p, args, model) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda p: _estimate_one(p, args, model), paths))
    _write_json(records, args.out)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _build_model_from_flags(args) -> BpnnModel:
    from .estimators import build_bpnn

    return build_bpnn(args.kind, args.layers, card=args.card, max_arity=args.max_arity,
                      alpha=args.alpha, weight_tied=args.weight_tied, head=args.head,
                      seed=args.seed)


def cmd_train(args) -> int:
    dataset = training.load_dataset(args.manifest)
    labeled = [inst for inst in dataset
               if inst.ln_z is not None and math.isfinite(inst.ln_z)]
    skipped = len(dataset) - len(labeled)
    if skipped:
        print(f"warning: skipping {skipped} unlabeled instances", file=sys.stderr)
    if not labeled:
        raise ValueError("manifest contains no labeled instances")

    model = _build_model_from_flags(args)
    decay = {} if args.decay_epoch < 0 else {args.decay_epoch: args.decay_factor}
    k_range = None
    if args.k_min is not None or args.k_max is not None:
        if args.k_min is None or args.k_max is None:
            raise ValueError("--k-min and --k-max must be given together")
        k_range = (args.k_min, args.k_max)
    config = TrainConfig(epochs=args.epochs, lr=args.lr, decay=decay,
                         batch_size=args.batch_size, clip_norm=args.clip_norm,
                         seed=args.seed, k_range=k_range)
    history = train(model, labeled, config)
    save_checkpoint(model, args.out_checkpoint)
    if args.loss_csv:
        with open(args.loss_csv, "w", encoding="utf-8") as handle:
            training.write_loss_csv(history, handle)
    print(f"trained {args.epochs} epochs on {len(labeled)} instances; "
          f"final loss {history.losses[-1]:.6g}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    dataset = training.load_dataset(args.manifest)
    labeled = [inst for inst in dataset
               if inst.ln_z is not None and math.isfinite(inst.ln_z)]
    if not labeled:
        raise ValueError("manifest contains no labeled instances")

    if args.method == "bpnn":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for --method bpnn")
        model = load_checkpoint(args.checkpoint)
        predict = lambda g: model.estimate_ln_z(g, args.iters)
    elif args.method == "bp":
        config = BpConfig(alpha=args.alpha, tol=args.tol, max_iters=args.max_iters,
                          schedule=args.schedule)
        config.validate()
        predict = lambda g: bethe_ln_z(g, run_bp(g, config).messages)
    else:
        predict = lambda g: variable_elimination_ln_z(g).ln_z

    errors: dict[str, list[float]] = {}
    for inst in labeled:
        errors.setdefault(inst.tag or "untagged", []).append(predict(inst.graph) - inst.ln_z)

    def summarize(values: list[float]) -> dict:
        return {"count": len(values),
                "rmse": float(np.sqrt(np.mean(np.square(values))))}

    report = {"method": args.method,
              "overall": summarize([e for group in errors.values() for e in group]),
              "per_tag": {tag: summarize(group) for tag, group in sorted(errors.items())}}
    _write_json(report, args.out)
    return 0


# ---------------------------------------------------------------------------
# convergence-trace
# ---------------------------------------------------------------------------

def _parse_method_token(token: str) -> tuple[str, dict]:
    parts = token.split(":")
    name = parts[0]
    options = {}
    for part in parts[1:]:
        if "=" not in part:
            raise ValueError(f"bad method option {part!r} in {token!r}")
        key, value = part.split("=", 1)
        options[key] = value
    return name, options


def _trace_for_method(token: str, graph, args) -> list[float]:
    name, options = _parse_method_token(token)
    if name == "bp":
        config = BpConfig(alpha=float(options.get("alpha", args.alpha)),
                          tol=float(options.get("tol", args.tol)),
                          max_iters=int(options.get("max_iters", args.max_iters)),
                          schedule=options.get("schedule", args.schedule))
        config.validate()
        return run_bp(graph, config).delta_trace
    if name == "bpnn":
        if "checkpoint" not in options:
            raise ValueError(f"method {token!r} needs checkpoint=<path>")
        model = load_checkpoint(options["checkpoint"])
        tol = float(options.get("tol", args.tol))
        max_iters = int(options.get("max_iters", args.max_iters))
        state = prop.init_messages(graph)
        trace = []
        if model.weight_tied:
            for _ in range(max_iters):
                state, delta = model.layers[0].step(graph, state, None)
                trace.append(delta)
                if delta <= tol:
                    break
        else:
            n_iters = int(options["iters"]) if "iters" in options else None
            for layer in model.iteration_layers(n_iters):
                state, delta = layer.step(graph, state, None)
                trace.append(delta)
        return trace
    raise ValueError(f"unknown trace method {name!r}")


def cmd_convergence_trace(args) -> int:
    graph = load_graph_json(args.graph)
    methods = args.method or ["bp"]
    traces = [_trace_for_method(token, graph, args) for token in methods]
    lines = ["iteration," + ",".join(methods)]
    for row in range(max(len(t) for t in traces)):
        cells = [repr(t[row]) if row < len(t) else "" for t in traces]
        lines.append(f"{row + 1}," + ",".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_bp_flags(parser) -> None:
    parser.add_argument("--alpha", type=float, default=0.5)
    parser.add_argument("--tol", type=float, default=1e-5)
    parser.add_argument("--max-iters", type=int, default=200)
    parser.add_argument("--schedule", choices=["parallel", "sequential"],
                        default="parallel")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bpnn",
                     description="Factor-graph partition function toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[], help="sample datasets with exact labels")
    p.add_argument("--family", required=True, choices=["ising", "sbm", "cnf-dataset"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-n", type=int, default=6)
    p.add_argument("--f-max", type=float, default=0.1)
    p.add_argument("--c-max", type=float, default=5.0)
    p.add_argument("--nodes", type=int, default=15)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--class-probs", default="0.75,0.25")
    p.add_argument("--p-in", type=float, default=0.93)
    p.add_argument("--p-out", type=float, default=0.067)
    p.add_argument("--cnf-dir", default=None)
    p.add_argument("--label-cap-vars", type=int, default=24)
    p.add_argument("--max-arity", type=int, default=5)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("estimate", help="estimate ln Z with exact, bp, or bpnn")
    p.add_argument("--method", required=True, choices=["exact", "bp", "bpnn"])
    p.add_argument("--graphs", nargs="*", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--iters", type=int, default=None)
    _add_bp_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train", help="fit a model on a labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--kind", choices=["damping", "message"], default="damping")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--card", type=int, default=2)
    p.add_argument("--max-arity", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--head", choices=["bethe", "trajectory"], default="trajectory")
    p.add_argument("--weight-tied", action="store_true")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--decay-epoch", type=int, default=50)
    p.add_argument("--decay-factor", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE report against manifest labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=["exact", "bp", "bpnn"], default="bpnn")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_bp_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convergence-trace",
                       help="per-iteration message deltas as CSV")
    p.add_argument("--graph", required=True)
    p.add_argument("--method", action="append", default=None,
                   help="bp[:alpha=..][:tol=..] or bpnn:checkpoint=PATH[:iters=K]; repeatable")
    p.add_argument("--out", default=None)
    _add_bp_flags(p)
    p.set_defaults(func=cmd_convergence_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except INPUT_ERRORS as exc:
        print(f"bpnn: input error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
