"""Command-line interface: train, eval, sweep, inspect, synth.

Budgets and prices on the command line are expressed per 10,000 queries
(the unit catalogs are priced in) and converted to per-query internally.
Every command writes a run manifest next to its primary output so runs
can be reproduced exactly.

Exit codes: 0 success, 2 usage, 3 validation, 4 infeasible budget, 5 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .catalog import (
    ServiceCatalog,
    deserialize_strategy,
    load_catalog,
    save_catalog,
    serialize_strategy,
    validate_strategy,
)
from .dataset import load_dataset, save_dataset, split
from .errors import (
    CascadeError,
    DataFormatError,
    InfeasibleBudgetError,
    ValidationError,
)
from .estimation import estimate_model, model_dump
from .executor import replay_evaluate, replay_evaluate_strict, sweep, tradeoff_csv
from .master import SolverConfig, train
from .oracle import CorpusSpec, bundled_demo_spec, generate_synthetic_corpus
from .subproblem import build_g_function

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_INFEASIBLE = 4
EXIT_IO = 5

PER_QUERY = 10000.0  # CLI budget unit: USD per 10,000 queries


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path: str, command: str, args: argparse.Namespace, inputs: Sequence[str], started: float) -> None:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "flags": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "inputs": {p: _digest(p) for p in inputs},
        "duration_s": round(time.time() - started, 6),
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def _default_threads() -> int:
    env = os.environ.get("APICASCADE_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _solver_config(args: argparse.Namespace, catalog: ServiceCatalog) -> SolverConfig:
    fixed = None
    if args.restrict_base:
        fixed = catalog.service_index(args.restrict_base)
    return SolverConfig(
        budget=args.budget / PER_QUERY,
        grid_m=args.grid,
        seed=args.seed,
        fixed_base=fixed,
        uniform_threshold=args.uniform_threshold,
        threads=args.threads,
    )


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    catalog = load_catalog(args.catalog)
    dataset = load_dataset(args.data, catalog, strict_labels=args.strict_labels)
    config = _solver_config(args, catalog)
    strategy = train(dataset, catalog, config)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(serialize_strategy(strategy))
    _write_manifest(args.out, "train", args, [args.catalog, args.data], started)
    print(
        f"trained on {len(dataset)} samples: predicted accuracy "
        f"{strategy.meta['predicted_accuracy']:.4f} at cost "
        f"{strategy.meta['predicted_cost'] * PER_QUERY:.3f}/10k "
        f"(budget {args.budget}/10k) -> {args.out}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    catalog = load_catalog(args.catalog)
    dataset = load_dataset(args.data, catalog)
    with open(args.strategy, "r", encoding="utf-8") as fh:
        strategy = deserialize_strategy(fh.read(), catalog)
    problems = validate_strategy(strategy, catalog)
    if problems:
        raise ValidationError("; ".join(problems))
    if args.mode == "strict":
        if args.budget is None:
            raise ValidationError("strict mode needs --budget")
        report = replay_evaluate_strict(
            strategy, dataset, catalog, args.budget / PER_QUERY, seed=args.seed
        )
    else:
        mode = "sampled" if args.mode == "sample" else "expectation"
        report = replay_evaluate(strategy, dataset, catalog, seed=args.seed, mode=mode)
    print(report.format_text())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1)
        _write_manifest(args.out, "eval", args, [args.catalog, args.data, args.strategy], started)
    return EXIT_OK


def _parse_budget_range(text: str) -> list[float]:
    try:
        lo, hi, steps = text.split(":")
        lo_f, hi_f, n = float(lo), float(hi), int(steps)
    except ValueError:
        raise DataFormatError(f"--budgets expects lo:hi:steps, got {text!r}") from None
    if n < 1 or hi_f < lo_f:
        raise DataFormatError(f"bad budget range {text!r}")
    if n == 1:
        return [lo_f]
    return [lo_f + i * (hi_f - lo_f) / (n - 1) for i in range(n)]


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.time()
    catalog = load_catalog(args.catalog)
    dataset = load_dataset(args.data, catalog)
    train_set, test_set = split(dataset, args.train_fraction, args.seed)
    budgets = [b / PER_QUERY for b in _parse_budget_range(args.budgets)]
    config = _solver_config(argparse.Namespace(
        budget=budgets[0] * PER_QUERY, grid=args.grid, seed=args.seed,
        restrict_base=args.restrict_base, uniform_threshold=args.uniform_threshold,
        threads=args.threads,
    ), catalog)
    points, references = sweep(train_set, test_set, catalog, budgets, config)
    csv_text = tradeoff_csv(points, references)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    _write_manifest(args.out, "sweep", args, [args.catalog, args.data], started)
    ok = sum(1 for p in points if p.status == "ok")
    print(f"swept {len(points)} budgets ({ok} trained) -> {args.out}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    catalog = load_catalog(args.catalog)
    chunks: list[str] = []
    if args.strategy:
        with open(args.strategy, "r", encoding="utf-8") as fh:
            strategy = deserialize_strategy(fh.read(), catalog)
        problems = validate_strategy(strategy, catalog)
        chunks.append("strategy:")
        chunks.append(json.dumps(strategy.meta, indent=1, default=str))
        chunks.append(f"violations: {problems if problems else 'none'}")
    if args.data:
        dataset = load_dataset(args.data, catalog)
        model = estimate_model(dataset, catalog, args.grid)
        chunks.append(model_dump(model, catalog))
        if args.service:
            idx = catalog.service_index(args.service)
            g = build_g_function(model, idx, args.grid, catalog)
            chunks.append(f"value function for {args.service} (knot budget -> value):")
            for m in range(args.grid + 1):
                tag = "" if g.evaluated[m] else "  [below base cost, pinned 0]"
                chunks.append(f"  {g.theta[m] * PER_QUERY:.4f}/10k -> {g.values[m]:.6f}{tag}")
    if not chunks:
        raise ValidationError("nothing to inspect: pass --data and/or --strategy")
    print("\n".join(chunks))
    return EXIT_OK


def _parse_service_flag(text: str) -> tuple[str, float, list[float], float]:
    # name=cost:acc1,acc2,...:informativeness
    try:
        name, rest = text.split("=", 1)
        cost, accs, info = rest.split(":")
        return name, float(cost), [float(a) for a in accs.split(",")], float(info)
    except ValueError:
        raise DataFormatError(
            f"--service expects name=cost:acc1,acc2,...:informativeness, got {text!r}"
        ) from None


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    if args.demo:
        spec = bundled_demo_spec(args.samples)
    else:
        if not args.service or not args.labels:
            raise ValidationError("synth needs --labels and at least one --service (or --demo)")
        labels = tuple(args.labels.split(","))
        parsed = [_parse_service_flag(s) for s in args.service]
        for name, _, accs, _ in parsed:
            if len(accs) != len(labels):
                raise ValidationError(
                    f"service {name} lists {len(accs)} accuracies for {len(labels)} labels"
                )
        spec = CorpusSpec(
            n_samples=args.samples,
            labels=labels,
            services=tuple((name, cost) for name, cost, _, _ in parsed),
            accuracy=tuple(tuple(accs) for _, _, accs, _ in parsed),
            informativeness=tuple(info for _, _, _, info in parsed),
        )
    dataset, catalog = generate_synthetic_corpus(spec, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    catalog_path = os.path.join(args.out_dir, "catalog.yaml")
    data_path = os.path.join(args.out_dir, "data.csv")
    save_catalog(catalog, catalog_path)
    save_dataset(dataset, catalog, data_path)
    _write_manifest(data_path, "synth", args, [], started)
    print(f"wrote {len(dataset)} samples to {data_path} (catalog: {catalog_path})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apicascade",
        description="Learn and evaluate budget-constrained calling strategies "
        "over a catalog of paid prediction services.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--threads", type=int, default=_default_threads(),
                       help="worker threads (default: APICASCADE_THREADS or 1)")

    p_train = sub.add_parser("train", help="train a strategy for one budget")
    p_train.add_argument("--data", required=True, help="annotated corpus CSV")
    p_train.add_argument("--catalog", required=True, help="catalog YAML")
    p_train.add_argument("--budget", type=float, required=True,
                         help="budget per 10,000 queries")
    p_train.add_argument("--grid", type=int, default=10, help="grid resolution M")
    p_train.add_argument("--restrict-base", default=None,
                         help="force this service as the only base")
    p_train.add_argument("--uniform-threshold", action="store_true",
                         help="one threshold for all labels")
    p_train.add_argument("--strict-labels", action="store_true",
                         help="reject off-vocabulary predicted labels")
    p_train.add_argument("--out", default="strategy.json", help="strategy file to write")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="replay a strategy over a corpus")
    p_eval.add_argument("--strategy", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--catalog", required=True)
    p_eval.add_argument("--mode", choices=("expectation", "sample", "strict"),
                        default="expectation")
    p_eval.add_argument("--budget", type=float, default=None,
                        help="per-10k budget for strict mode")
    p_eval.add_argument("--out", default=None, help="write the report as JSON here")
    common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="trade-off curve across budgets")
    p_sweep.add_argument("--data", required=True)
    p_sweep.add_argument("--catalog", required=True)
    p_sweep.add_argument("--budgets", required=True, help="lo:hi:steps, per 10k queries")
    p_sweep.add_argument("--train-fraction", type=float, default=0.5)
    p_sweep.add_argument("--grid", type=int, default=10)
    p_sweep.add_argument("--restrict-base", default=None)
    p_sweep.add_argument("--uniform-threshold", action="store_true")
    p_sweep.add_argument("--out", default="tradeoff.csv")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_inspect = sub.add_parser("inspect", help="dump model, value-function, or strategy internals")
    p_inspect.add_argument("--catalog", required=True)
    p_inspect.add_argument("--data", default=None)
    p_inspect.add_argument("--strategy", default=None)
    p_inspect.add_argument("--service", default=None,
                           help="also dump this service's value function")
    p_inspect.add_argument("--grid", type=int, default=10)
    common(p_inspect)
    p_inspect.set_defaults(func=cmd_inspect)

    p_synth = sub.add_parser("synth", help="generate a synthetic replay corpus")
    p_synth.add_argument("--out-dir", required=True)
    p_synth.add_argument("--samples", type=int, default=4000)
    p_synth.add_argument("--labels", default=None, help="comma-separated label names")
    p_synth.add_argument("--service", action="append", default=None,
                         help="name=cost:acc1,acc2,...:informativeness (repeatable)")
    p_synth.add_argument("--demo", action="store_true",
                         help="write the bundled demo corpus")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InfeasibleBudgetError as exc:
        print(f"infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataFormatError, ValidationError, CascadeError) as exc:
        if isinstance(exc, DataFormatError) and isinstance(getattr(exc, "__cause__", None), OSError):
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
