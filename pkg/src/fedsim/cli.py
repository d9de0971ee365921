"""Command line: ``fedsim run|compare|inspect``.

Exit codes: 0 success, 1 configuration error, 2 runtime error. Errors are
printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace

from .config import ConfigError, load_config
from .runner import compare_runs, resolve_output_dir, run_experiment
from .serialization import SerializationError, load_checkpoint, payload_nbytes

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _error(kind: str, exc: BaseException, out_dir=None) -> None:
    doc = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    if kind == "runtime":
        doc["traceback"] = traceback.format_exc()
    text = json.dumps(doc, indent=2)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(text)
        except OSError:
            pass


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.rounds is not None:
            overrides["rounds"] = args.rounds
        if args.parallel_clients is not None:
            overrides["parallel_clients"] = args.parallel_clients
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = replace(cfg, **overrides)
        cfg.validate()
    except ConfigError as exc:
        _error("config", exc)
        return EXIT_CONFIG
    out = resolve_output_dir(cfg, args.output)
    try:
        summary = run_experiment(cfg, out)
    except ConfigError as exc:
        _error("config", exc, out)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a structured runtime error
        _error("runtime", exc, out)
        return EXIT_RUNTIME
    print(json.dumps({"output_dir": str(out), "final_arch": summary["final_arch"],
                      "server_best_round": summary["server_best_round"]}))
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        table, best = compare_runs(args.dirs, args.output)
    except (ConfigError, ValueError) as exc:
        _error("config", exc)
        return EXIT_CONFIG
    for row in best:
        print(json.dumps(row))
    if args.output is None:
        print(json.dumps({"rounds": len(table)}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        arch, w, meta = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        _error("config", exc)
        return EXIT_CONFIG
    except SerializationError as exc:
        _error("runtime", exc)
        return EXIT_RUNTIME
    layers = []
    for i, spec in enumerate(arch.layers):
        entry = {"index": i, "kind": spec.kind.value, "units": spec.units, "kernel": spec.kernel}
        if w.weights[i] is not None:
            entry["weight_shape"] = list(w.weights[i].shape)
            entry["parameters"] = int(w.weights[i].size + w.biases[i].size)
        layers.append(entry)
    print(json.dumps({
        "arch": arch.describe(),
        "input_shape": list(arch.input_shape),
        "classes": arch.class_count,
        "layers": layers,
        "payload_bytes_float32": payload_nbytes(w),
        "meta": meta,
    }, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated aggregation simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a TOML config")
    run.add_argument("config")
    run.add_argument("-o", "--output", help="output directory (overrides the config)")
    run.add_argument("--rounds", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--parallel-clients", type=int, dest="parallel_clients")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="side-by-side table of several runs")
    cmp_.add_argument("dirs", nargs="+")
    cmp_.add_argument("-o", "--output", help="CSV path for the comparison table")
    cmp_.set_defaults(func=cmd_compare)

    insp = sub.add_parser("inspect", help="describe a checkpoint file")
    insp.add_argument("checkpoint")
    insp.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
