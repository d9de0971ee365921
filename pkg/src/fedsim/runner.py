"""Batch experiment runs and run-to-run comparison tables."""
from __future__ import annotations

import csv
import json
import logging
import os
import re
from pathlib import Path

from . import kernels
from .aggregators import make_strategy
from .config import ConfigError, ExperimentConfig, parse_arch
from .data import global_test_set, load_manifest, normalize_clients, partition_by_participant, synth_noniid
from .engine import EngineConfig, clients_from_partitions, init_server, run_round
from .nn import TrainConfig
from .serialization import save_checkpoint

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FEDSIM_OUTPUT_ROOT"
ROUND_FIELDS = [
    "round",
    "strategy",
    "global_macro_f1",
    "global_accuracy",
    "personalization_macro_f1_mean",
    "personalization_macro_f1_std",
    "personalization_accuracy_mean",
    "personalization_accuracy_std",
    "generalization_macro_f1_mean",
    "generalization_macro_f1_std",
    "generalization_accuracy_mean",
    "generalization_accuracy_std",
    "arch",
    "arch_delta",
    "sub_rounds",
    "uplink_bytes",
    "downlink_bytes",
    "cumulative_uplink_bytes",
    "cumulative_downlink_bytes",
]


def resolve_output_dir(cfg: ExperimentConfig, override=None) -> Path:
    out = Path(override or cfg.output_dir)
    if not out.is_absolute():
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(root) / out if root else Path(cfg.base_dir) / out
    return out


def build_clients(cfg: ExperimentConfig):
    """Returns ``(clients, global_test, n_classes)``."""
    data = cfg.data
    if data.source == "synthetic":
        partitions = synth_noniid(data.synthetic)
        n_classes = data.synthetic.n_classes
    else:
        manifest = Path(data.csv.manifest)
        if not manifest.is_absolute():
            manifest = Path(cfg.base_dir) / manifest
        if not manifest.exists():
            raise ConfigError(f"manifest not found: {manifest}")
        recordings, classes = load_manifest(manifest, data.csv.classes, data.csv.sampling_rate_hz)
        partitions, _ = partition_by_participant(
            recordings, data.csv.split, data.csv.window, data.csv.overlap, data.csv.min_windows
        )
        n_classes = len(classes)
    if data.normalize:
        partitions, _ = normalize_clients(partitions)
    return clients_from_partitions(partitions), global_test_set(partitions), n_classes


def _fmt(value):
    if value is None:
        return "NA"
    if isinstance(value, list):
        return ";".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def _best(history, key):
    best = None
    for rep in history:
        value = getattr(rep, key)
        if value is not None and (best is None or value > best[1]):
            best = (rep.round, value)
    return None if best is None else {"round": best[0], "value": best[1]}


def _write_checkpoints(out: Path, server, clients, t: int) -> None:
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    save_checkpoint(ckpt / f"server_round{t:04d}.fsck", server.arch, server.weights,
                    {"role": "server", "round": t})
    for c in clients:
        if c.weights is not None:
            save_checkpoint(ckpt / f"client_{_safe(c.client_id)}_round{t:04d}.fsck", server.arch,
                            c.weights, {"role": "client", "client_id": c.client_id, "round": t})


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> dict:
    """Run every round, writing rounds.csv/jsonl, divergence.csv, checkpoints and summary.json."""
    cfg.validate()
    out = resolve_output_dir(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True, default=str))

    clients, global_test, n_classes = build_clients(cfg)
    input_shape = clients[0].train.frames.shape[1:]
    try:
        arch = parse_arch(cfg.arch, n_classes, input_shape)
    except ValueError as exc:  # includes ShapeError for archs too deep for the window
        raise ConfigError(f"arch {cfg.arch!r}: {exc}") from None
    try:
        strategy = make_strategy(cfg.strategy.name, **cfg.strategy.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[strategy]: {exc}") from None
    engine_cfg = EngineConfig(
        TrainConfig(cfg.train.local_epochs, cfg.train.batch_size, cfg.train.learning_rate,
                    cfg.train.dropout, cfg.seed),
        seed=cfg.seed,
        parallel_clients=cfg.parallel_clients,
    )
    server = init_server(arch, cfg.seed)
    initial_arch = arch.describe()

    with (out / "rounds.csv").open("w", newline="") as f_csv, \
            (out / "rounds.jsonl").open("w") as f_json, \
            (out / "divergence.csv").open("w", newline="") as f_div:
        rows = csv.writer(f_csv, lineterminator="\n")
        rows.writerow(ROUND_FIELDS)
        div = csv.writer(f_div, lineterminator="\n")
        div.writerow(["round", "layer", "client", "mean_distance", "max_distance"])
        for _ in range(cfg.rounds):
            server, report = run_round(server, clients, strategy, engine_cfg, global_test)
            record = report.to_dict()
            rows.writerow([_fmt(record[k]) for k in ROUND_FIELDS])
            f_json.write(json.dumps(record, sort_keys=True) + "\n")
            for entry in report.divergence:
                for k, c in enumerate(clients):
                    div.writerow([report.round, entry.layer, c.client_id,
                                  repr(float(entry.client_mean[k])), repr(float(entry.client_max[k]))])
            t = report.round
            if (cfg.checkpoint_interval and t % cfg.checkpoint_interval == 0) or t == cfg.rounds:
                _write_checkpoints(out, server, clients, t)

    history = server.history
    total_delta = [sum(col) for col in zip(*(r.arch_delta for r in history))]
    summary = {
        "name": cfg.name,
        "strategy": strategy.name,
        "strategy_params": strategy.params(),
        "rounds": cfg.rounds,
        "clients": len(clients),
        "kernel_backend": kernels.BACKEND,
        "initial_arch": initial_arch,
        "final_arch": server.arch.describe(),
        "arch_delta": total_delta,
        "server_best_round": _best(history, "global_macro_f1"),
        "client_best_round": _best(history, "personalization_macro_f1_mean"),
        "generalization_best_round": _best(history, "generalization_macro_f1_mean"),
        "final": history[-1].to_dict(),
        "total_uplink_bytes": server.ledger.total_uplink,
        "total_downlink_bytes": server.ledger.total_downlink,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _read_rounds(run_dir: Path):
    path = Path(run_dir) / "rounds.csv"
    if not path.exists():
        raise ConfigError(f"{run_dir}: no rounds.csv")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        return reader.fieldnames, list(reader)


def _num(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


NUMERIC_FIELDS = [f for f in ROUND_FIELDS if f not in {"round", "strategy", "arch", "arch_delta"}]


def compare_runs(dirs, out_path=None):
    """Align per-round metrics of several runs side by side.

    Returns ``(table_rows, best_rows)``. Every metric gets one column per run
    plus a ``diff`` column per later run relative to the first. With
    ``out_path`` the table is written there and the best-round summary next
    to it as ``<stem>_best.csv``.
    """
    dirs = [Path(d) for d in dirs]
    if len(dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    labels, runs = [], []
    header = None
    for d in dirs:
        fields, rows = _read_rounds(d)
        if header is None:
            header = fields
        elif fields != header:
            raise ConfigError(f"{d}: rounds.csv schema differs from {dirs[0]}")
        label = d.name or str(d)
        if label in labels:
            label = f"{label}#{len(labels) + 1}"
        labels.append(label)
        runs.append({int(r["round"]): r for r in rows})

    rounds = sorted(set().union(*runs))
    table = []
    for t in rounds:
        row = {"round": t}
        for metric in NUMERIC_FIELDS:
            values = [_num(run.get(t, {}).get(metric)) for run in runs]
            for label, v in zip(labels, values):
                row[f"{label}:{metric}"] = v
            for label, v in zip(labels[1:], values[1:]):
                base = values[0]
                row[f"diff:{label}:{metric}"] = None if v is None or base is None else v - base
        table.append(row)

    best = []
    for label, run in zip(labels, runs):
        entry = {"run": label}
        for metric in ("global_macro_f1", "personalization_macro_f1_mean", "generalization_macro_f1_mean"):
            top = None
            for t in sorted(run):
                v = _num(run[t].get(metric))
                if v is not None and (top is None or v > top[1]):
                    top = (t, v)
            entry[f"{metric}_best_round"] = None if top is None else top[0]
            entry[f"{metric}_best"] = None if top is None else top[1]
        best.append(entry)

    if out_path is not None:
        out_path = Path(out_path)
        _write_rows(out_path, table)
        _write_rows(out_path.with_name(out_path.stem + "_best.csv"), best)
    return table, best


def _write_rows(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})
