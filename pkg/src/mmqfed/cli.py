"""Command-line experiment runner.

Verbs::

    mmqfed run <config.json> [--output-dir DIR]
    mmqfed sweep <config.json> --axis AXIS --values V [V ...] [--repeats K] [--output-dir DIR]
    mmqfed evaluate <checkpoint.mmqc> <data.mmqf> [--output FILE]

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
incompatible inputs. ``MMQFED_WORKERS`` sets the worker count (client
threads for ``run``, concurrent cells for ``sweep``).

Artifacts of ``run`` (inside the output directory):

* ``config.json``: the canonicalized config that was executed.
* ``metrics.csv``: one row per round with columns ``round``,
  ``train_accuracy``, ``test_accuracy``, ``acc_<modality>`` (that modality
  alone) and ``loss_client_<k>`` (last local epoch). Contains no timing, so
  it is byte-identical across noiseless reruns.
* ``summary.json``: config hash, sub-seeds, final accuracies, wall time.
* ``checkpoints/round_XXXX.mmqc`` and ``final.mmqc``.
* ``train.mmqf`` / ``test.mmqf``: the exact datasets used.

``sweep`` runs each cell under ``<output>/sweep_<axis>/cells/`` and writes
``sweep_<axis>.csv`` (one row per value x repeat: ``axis, value, repeat,
seed, config_hash, status, train_accuracy, test_accuracy, acc_<modality>...,
error``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import model as mdl
from .circuits import NoiseSpec
from .config import ExperimentConfig, canonical_json, load_config
from .data import MissingSpec, gen_synthetic, inject_missing, load_features, save_features
from .errors import ConfigError, FormatError, NumericError, StructuralError
from .federation import FederationSettings, RoundFailure, partition, run_federation
from .seeding import derive_rng, derive_seed

log = logging.getLogger("mmqfed")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
WORKERS_ENV = "MMQFED_WORKERS"
SWEEP_AXES = ("qubits", "layers", "clients", "data_fraction", "missing_fraction", "mma_on_off")


def env_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError({WORKERS_ENV: f"expected a positive integer, got {raw!r}"}) from None
    if value < 1:
        raise ConfigError({WORKERS_ENV: f"expected a positive integer, got {raw!r}"})
    return value


def fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _jsonable(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


# --- experiment assembly -----------------------------------------------------------

@dataclass
class Experiment:
    config: ExperimentConfig
    model: mdl.MultimodalModel
    train: object
    test: object
    shards: list
    settings: FederationSettings
    seeds: dict


def sub_seeds(seed: int) -> dict:
    return {
        tag: derive_seed(seed, tag)
        for tag in ("data", "fraction", "missing-train", "missing-test", "partition", "init", "noise", "federation")
    }


def model_specs(cfg: ExperimentConfig) -> List[mdl.ModalitySpec]:
    return [mdl.ModalitySpec(m.name, m.input_dim, m.num_qubits, m.num_layers) for m in cfg.modalities]


def load_data(cfg: ExperimentConfig, seeds: dict):
    """Train and test sets over all configured modalities, before any
    subsetting or missing-modality injection."""
    specs = model_specs(cfg)
    if cfg.data.source == "synthetic":
        full = gen_synthetic(
            cfg.data.num_train + cfg.data.num_test,
            specs,
            cfg.num_classes,
            cfg.data.class_separation,
            cfg.data.cross_modal_weight,
            seeds["data"],
            offset=cfg.data.offset,
            noise_scale=cfg.data.noise_scale,
        )
        n = cfg.data.num_train
        return full.subset(np.arange(n)), full.subset(np.arange(n, len(full)))
    train = load_features(cfg.data.train_path)
    test = load_features(cfg.data.test_path)
    for name, ds in (("train_path", train), ("test_path", test)):
        dims = [(s.name, s.input_dim) for s in ds.specs]
        want = [(s.name, s.input_dim) for s in specs]
        if dims != want or ds.num_classes != cfg.num_classes:
            raise ConfigError({f"data.{name}": f"file has modalities {dims} and C={ds.num_classes}, "
                                               f"config expects {want} and C={cfg.num_classes}"})
    return train, test


def build_experiment(cfg: ExperimentConfig, workers: int = 1) -> Experiment:
    seeds = sub_seeds(cfg.seed)
    train, test = load_data(cfg, seeds)

    if cfg.data.fraction < 1.0:
        # prefix of one fixed permutation, so smaller fractions are nested in larger ones
        keep = max(1, int(math.floor(cfg.data.fraction * len(train) + 0.5)))
        order = np.random.default_rng(seeds["fraction"]).permutation(len(train))
        train = train.subset(np.sort(order[:keep]))

    fractions = cfg.missing.fractions
    if fractions is not None and any(f > 0 for f in fractions):
        spec = MissingSpec(fractions, cfg.missing.garbage, seeds["missing-train"], cfg.missing.sigma)
        train, _ = inject_missing(train, spec)
        if cfg.missing.apply_to_test:
            spec = MissingSpec(fractions, cfg.missing.garbage, seeds["missing-test"], cfg.missing.sigma)
            test, _ = inject_missing(test, spec)

    active = cfg.active_modalities
    if len(active) != len(cfg.modalities):
        train = train.select_modalities(active)
        test = test.select_modalities(active)

    specs = model_specs(cfg)
    model = mdl.MultimodalModel(
        [specs[m] for m in active],
        cfg.num_classes,
        cfg.fusion_layers,
        projection_seeds=[derive_seed(cfg.seed, "projection", m) for m in active],
        mma=cfg.mma,
    )
    model.init_params(seeds["init"])
    shards = partition(train, cfg.federation.clients, cfg.partition.scheme, cfg.partition.alpha, seeds["partition"])
    settings = FederationSettings(
        rounds=cfg.federation.rounds,
        local_epochs=cfg.federation.local_epochs,
        batch_size=cfg.federation.batch_size,
        optimizer=cfg.optimizer.kind,
        learning_rate=cfg.optimizer.learning_rate,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
        noise=NoiseSpec(cfg.noise.mode, cfg.noise.p, seeds["noise"], cfg.noise.allow_out_of_range),
        seed=seeds["federation"],
        workers=workers,
    )
    return Experiment(cfg, model, train, test, shards, settings, seeds)


# --- run ------------------------------------------------------------------------------

def metrics_header(exp: Experiment) -> list:
    return (
        ["round", "train_accuracy", "test_accuracy"]
        + [f"acc_{s.name}" for s in exp.model.specs]
        + [f"loss_client_{k}" for k in range(len(exp.shards))]
    )


def metrics_row(report) -> list:
    return (
        [report.round + 1, fmt(report.train_accuracy), fmt(report.test_accuracy)]
        + [fmt(a) for a in report.modality_accuracies]
        + [fmt(x) for x in report.client_losses]
    )


def _noise_header(noise: NoiseSpec) -> dict:
    return {"mode": noise.mode, "p": noise.p, "seed": noise.seed, "allow_out_of_range": noise.allow_out_of_range}


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> dict:
    """Execute one experiment and write its artifacts; returns the summary."""
    t0 = time.perf_counter()
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    exp = build_experiment(cfg, workers)
    chash = cfg.config_hash()
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    save_features(exp.train, out / "train.mmqf")
    save_features(exp.test, out / "test.mmqf")
    ckpt_extra = {"config_hash": chash, "noise": _noise_header(exp.settings.noise)}

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(exp))

        def on_round(report, global_model):
            writer.writerow(metrics_row(report))
            fh.flush()
            mdl.save_checkpoint(
                exp.model, out / "checkpoints" / f"round_{report.round + 1:04d}.mmqc",
                round=report.round + 1, **ckpt_extra,
            )

        _, reports = run_federation(
            exp.model, exp.shards, exp.test, exp.settings, train_set=exp.train, on_round=on_round
        )
    mdl.save_checkpoint(exp.model, out / "final.mmqc", round=len(reports), **ckpt_extra)

    last = reports[-1]
    summary = {
        "experiment_id": cfg.experiment_id,
        "config_hash": chash,
        "master_seed": cfg.seed,
        "seeds": exp.seeds,
        "rounds": len(reports),
        "num_train": len(exp.train),
        "num_test": len(exp.test),
        "clients": [len(s) for s in exp.shards],
        "final": {
            "train_accuracy": _jsonable(last.train_accuracy),
            "test_accuracy": _jsonable(last.test_accuracy),
            "modality_accuracies": {
                s.name: _jsonable(a) for s, a in zip(exp.model.specs, last.modality_accuracies)
            },
        },
        "round_wall_time_s": [r.wall_time for r in reports],
        "wall_time_s": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# --- sweep ----------------------------------------------------------------------------

def parse_axis_values(axis: str, values) -> list:
    tokens = [v for raw in values for v in str(raw).split(",") if v.strip()]
    if axis == "mma_on_off":
        tokens = tokens or ["on", "off"]
        table = {"on": True, "true": True, "1": True, "off": False, "false": False, "0": False}
        bad = [t for t in tokens if t.strip().lower() not in table]
        if bad:
            raise ConfigError({"--values": f"mma_on_off takes on/off, got {bad}"})
        return [table[t.strip().lower()] for t in tokens]
    if not tokens:
        raise ConfigError({"--values": "need at least one value"})
    cast = float if axis in ("data_fraction", "missing_fraction") else int
    try:
        return [cast(t) for t in tokens]
    except ValueError:
        raise ConfigError({"--values": f"cannot parse {tokens} for axis {axis}"}) from None


def apply_axis(cfg: ExperimentConfig, axis: str, value, seed: int) -> ExperimentConfig:
    raw = cfg.to_dict()
    raw["seed"] = seed
    if axis == "qubits":
        for m in raw["modalities"]:
            m["num_qubits"] = value
    elif axis == "layers":
        for m in raw["modalities"]:
            m["num_layers"] = value
    elif axis == "clients":
        raw["federation"]["clients"] = value
    elif axis == "data_fraction":
        raw["data"]["fraction"] = value
    elif axis == "missing_fraction":
        fractions = list(raw["missing"]["fractions"] or [0.0] * len(raw["modalities"]))
        for t in raw["missing"]["targets"]:
            fractions[t] = value
        raw["missing"]["fractions"] = fractions
    elif axis == "mma_on_off":
        raw["mma"] = bool(value)
    else:
        raise ConfigError({"--axis": f"unknown axis {axis!r}"})
    from .config import parse_config

    try:
        return parse_config(raw)
    except ConfigError as exc:
        raise ConfigError({f"{axis}={value}: {k}": v for k, v in exc.errors.items()}) from exc


def repeat_seed(master: int, repeat: int) -> int:
    # shared by every value of the axis, so cells differ only in the swept setting
    return derive_seed(master, "repeat", repeat)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _value_label(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def sweep(cfg: ExperimentConfig, axis: str, values, repeats: int = 1, out_dir=None, workers: int = 1):
    """Run one experiment per (value, repeat). Returns ``(rows, csv_path)``;
    failed cells are recorded with ``status == "failed"``."""
    if axis not in SWEEP_AXES:
        raise ConfigError({"--axis": f"must be one of {list(SWEEP_AXES)}"})
    if repeats < 1:
        raise ConfigError({"--repeats": "must be >= 1"})
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    cell_root = out / f"sweep_{axis}" / "cells"
    cell_root.mkdir(parents=True, exist_ok=True)
    cells = []
    for i, value in enumerate(values):
        for k in range(repeats):
            seed = repeat_seed(cfg.seed, k)
            cells.append((i, value, k, seed, apply_axis(cfg, axis, value, seed)))

    def run_cell(cell):
        i, value, k, seed, cell_cfg = cell
        row = {"axis": axis, "value": _value_label(value), "repeat": k, "seed": seed,
               "config_hash": cell_cfg.config_hash(), "status": "ok", "error": ""}
        try:
            summary = run_experiment(cell_cfg, cell_root / f"{i:03d}_{_value_label(value)}_r{k}", workers=1)
        except Exception as exc:  # recorded; the sweep continues
            log.error("cell %s=%s repeat %d failed: %s", axis, value, k, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            return row
        row["train_accuracy"] = summary["final"]["train_accuracy"]
        row["test_accuracy"] = summary["final"]["test_accuracy"]
        for name, acc in summary["final"]["modality_accuracies"].items():
            row[f"acc_{name}"] = acc
        return row

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]

    columns = (
        ["axis", "value", "repeat", "seed", "config_hash", "status", "train_accuracy", "test_accuracy"]
        + [f"acc_{m.name}" for m in cfg.modalities]
        + ["error"]
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([
            fmt(row[c]) if isinstance(row.get(c), float) else ("" if row.get(c) is None else row.get(c))
            for c in columns
        ])
    path = out / f"sweep_{axis}.csv"
    _atomic_write(path, buf.getvalue())
    return rows, path


def median_by_value(rows, key: str = "test_accuracy") -> dict:
    groups = {}
    for row in rows:
        if row["status"] == "ok" and row.get(key) is not None:
            groups.setdefault(row["value"], []).append(row[key])
    return {v: float(np.median(accs)) for v, accs in groups.items()}


# --- evaluate -------------------------------------------------------------------------

def evaluate(ckpt_path, data_path) -> dict:
    model, header = mdl.load_checkpoint(ckpt_path)
    data = load_features(data_path)
    want = [(s.name, s.input_dim) for s in model.specs]
    have = [(s.name, s.input_dim) for s in data.specs]
    if want != have or data.num_classes != model.num_classes:
        raise StructuralError(
            f"checkpoint expects modalities {want} with C={model.num_classes}; "
            f"dataset has {have} with C={data.num_classes}"
        )
    noise_cfg = header.get("noise") or {"mode": "off"}
    noise = NoiseSpec(**noise_cfg) if noise_cfg.get("mode", "off") != "off" else NoiseSpec()
    rnd = int(header.get("round", 1))

    def rng(tag):
        return derive_rng(noise.seed, tag, rnd - 1) if noise.mode == "per_gate_pauli" else None

    return {
        "checkpoint": str(ckpt_path),
        "dataset": str(data_path),
        "num_samples": len(data),
        "accuracy": mdl.accuracy(model, data, noise, rng("eval-train")),
        "modality_accuracies": {
            s.name: _jsonable(a)
            for s, a in zip(model.specs, mdl.modality_accuracies(model, data, noise, rng("eval-modality")))
        },
    }


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmqfed", description="Multimodal quantum federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per round")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="overrides output_dir from the config")

    p = sub.add_parser("sweep", help="run one experiment per value of an axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", nargs="*", default=[], help="space or comma separated")
    p.add_argument("--repeats", type=int, default=1, help="seeds per value")
    p.add_argument("--output-dir", default=None)

    p = sub.add_parser("evaluate", help="score a checkpoint on an MMQF dataset")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--output", default=None, help="report path (default: <checkpoint>.eval.json)")
    return parser


def _report_config_error(exc: ConfigError) -> int:
    print("invalid configuration:", file=sys.stderr)
    for field_name, msg in exc.errors.items():
        print(f"  {field_name}: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        workers = env_workers()
        if args.command == "run":
            cfg = load_config(args.config)
            summary = run_experiment(cfg, args.output_dir, workers)
            print(json.dumps({"config_hash": summary["config_hash"], **summary["final"]}, sort_keys=True))
            return EXIT_OK
        if args.command == "sweep":
            cfg = load_config(args.config)
            values = parse_axis_values(args.axis, args.values)
            rows, path = sweep(cfg, args.axis, values, args.repeats, args.output_dir, workers)
            for value, acc in median_by_value(rows).items():
                print(f"{args.axis}={value}: median test accuracy {acc:.4f}")
            failed = sum(r["status"] != "ok" for r in rows)
            print(f"wrote {path} ({len(rows)} cells, {failed} failed)")
            return EXIT_RUNTIME if failed else EXIT_OK
        if args.command == "evaluate":
            try:
                report = evaluate(args.checkpoint, args.data)
            except (StructuralError, FormatError) as exc:
                print(f"incompatible inputs: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            text = json.dumps(report, indent=2, sort_keys=True)
            print(text)
            out = Path(args.output) if args.output else Path(str(args.checkpoint) + ".eval.json")
            out.write_text(text + "\n")
            return EXIT_OK
    except ConfigError as exc:
        return _report_config_error(exc)
    except (RoundFailure, NumericError, StructuralError, FormatError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
