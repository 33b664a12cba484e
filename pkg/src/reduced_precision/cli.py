"""Command-line driver for precision sweeps and error-analysis reports.

Sweep output is a CSV with one row per run::

    run_id,swept_param,swept_value,mantissa_bits,rounding,granularity,seed,
    epoch,test_accuracy,epochs_to_90,status

``epoch`` is the last epoch the run reached (the diverging epoch for a
diverged run) and ``test_accuracy`` the accuracy after the last completed
epoch (``nan`` if none completed). ``epochs_to_90`` is the first 1-based
epoch reaching 90% test accuracy, or -1 if the run never got there. Full
config snapshots, per-epoch accuracy curves and wall times go to
``<out>.runs.jsonl`` so the CSV body stays reproducible.

Reruns resume: runs already present in the CSV are kept, missing ones are
computed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from reduced_precision import analysis
from reduced_precision.data import load_mnist
from reduced_precision.network import (
    ConvLayerSpec,
    NetworkSpec,
    RunRecord,
    TrainConfig,
    config_snapshot,
    epochs_to_threshold,
    train,
)
from reduced_precision.quant import Granularity, PrecisionConfig, Rounding

log = logging.getLogger("reduced_precision")

CSV_COLUMNS = [
    "run_id", "swept_param", "swept_value", "mantissa_bits", "rounding", "granularity",
    "seed", "epoch", "test_accuracy", "epochs_to_90", "status",
]
PROP1_COLUMNS = ["n", "eps", "predicted", "measured", "ratio", "truncation_error"]
BACKPROP_COLUMNS = [
    "g", "y", "eps_y", "exact", "term_leading", "term_eps", "term_eps2", "term_eps3",
    "residual", "step1_literal", "step1_stated",
]
SWEEPS = ("bitsize", "rounding", "dense-layers", "dense-units", "batch-size", "init-perturbation")
CONVERGENCE_THRESHOLD = 0.9

__all__ = ["SweepSpec", "run_sweep", "epochs_to_threshold", "prop1_report", "backprop_report", "main"]


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple
    mantissa_bits: tuple = (23,)
    seeds: tuple = (0,)
    base: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)

    def __post_init__(self):
        if self.param not in SWEEPS and self.param != "none":
            raise ValueError(f"unknown sweep parameter {self.param!r}")
        if not self.values:
            raise ValueError("sweep value list is empty")
        if not self.seeds or not self.mantissa_bits:
            raise ValueError("need at least one seed and one mantissa width")

    def cells(self):
        """``(swept_value, NetworkSpec, TrainConfig)`` for every grid cell, in file order."""
        widths = (None,) if self.param == "bitsize" else self.mantissa_bits
        for value in self.values:
            for m in widths:
                for seed in self.seeds:
                    yield (value, *self._apply(value, m, seed))

    def _apply(self, value, m, seed):
        net, cfg = self.network, self.base
        prec = cfg.precision
        if self.param == "bitsize":
            prec = dataclasses.replace(prec, mantissa_bits=int(value) - 9)
        else:
            prec = dataclasses.replace(prec, mantissa_bits=m)
        if self.param == "rounding":
            prec = dataclasses.replace(prec, rounding=Rounding(value))
        elif self.param == "dense-layers":
            net = dataclasses.replace(net, dense_layers=int(value))
        elif self.param == "dense-units":
            net = dataclasses.replace(net, dense_units=int(value))
        elif self.param == "batch-size":
            cfg = dataclasses.replace(cfg, batch_size=int(value))
        elif self.param == "init-perturbation":
            cfg = dataclasses.replace(cfg, init_perturbation=float(value))
        return net, dataclasses.replace(cfg, seed=seed, precision=prec)


def run_id(record_config: dict, subset, test_subset) -> str:
    key = json.dumps({"config": record_config, "subset": subset, "test_subset": test_subset}, sort_keys=True)
    return hashlib.sha256(key.encode()).hexdigest()[:12]


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def record_row(rid, param, value, cfg: TrainConfig, record: RunRecord):
    prec = cfg.precision
    e90 = record.epochs_to(CONVERGENCE_THRESHOLD)
    if record.status == "diverged":
        epoch = record.diverged_epoch
    else:
        epoch = len(record.accuracies)
    acc = record.accuracies[-1] if record.accuracies else float("nan")
    row = [rid, param, value, prec.mantissa_bits, prec.rounding.value, prec.granularity.value, cfg.seed,
           epoch, acc, -1 if e90 is None else e90, record.status]
    return [_fmt(v) for v in row]


def _read_existing(out_path: Path):
    """Rows of the existing CSV keyed by run id."""
    if not out_path.exists():
        return {}
    runs: dict[str, list] = {}
    with open(out_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise ValueError(f"{out_path} has an unexpected header; refusing to resume into it")
        for row in reader:
            if len(row) == len(CSV_COLUMNS) and row[-1] in ("completed", "diverged"):
                runs[row[0]] = row
    return runs


# worker state for process pools: datasets are loaded once per process
_DATA: dict = {}


def _init_worker(data_dir, subset, test_subset):
    _DATA["train"] = load_mnist(data_dir, "train").subset(subset)
    _DATA["test"] = load_mnist(data_dir, "test").subset(test_subset)


def _train_cell(args):
    net, cfg = args
    return train(net, cfg, _DATA["train"], _DATA["test"])


def run_sweep(spec: SweepSpec, out_path, data_dir=None, subset=None, test_subset=None,
              jobs: int = 1, datasets=None):
    """Run every grid cell missing from ``out_path``, rewriting the CSV after each run.

    ``datasets`` may supply ``(train, test)`` directly instead of ``data_dir``.
    Returns the list of ``RunRecord`` objects computed in this invocation.
    """
    out_path = Path(out_path)
    cells = list(spec.cells())
    existing = _read_existing(out_path)
    plan = []
    for value, net, cfg in cells:
        rid = run_id(config_snapshot(net, cfg), subset, test_subset)
        done = rid in existing
        plan.append((rid, value, net, cfg, done))
    rows = {rid: existing[rid] for rid, *_, done in plan if done}
    todo = [(i, net, cfg) for i, (rid, value, net, cfg, done) in enumerate(plan) if not done]
    log.info("%d cells, %d to run", len(plan), len(todo))
    side = out_path.with_name(out_path.name + ".runs.jsonl")
    sidecar = _read_sidecar(side, set(rows))
    out_path.parent.mkdir(parents=True, exist_ok=True)

    def flush():
        # single writer: the whole file is rewritten atomically after every finished run
        tmp = out_path.with_name(out_path.name + ".tmp")
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerows(rows[rid] for rid, *_ in plan if rid in rows)
        os.replace(tmp, out_path)
        side.write_text("".join(sidecar[rid] + "\n" for rid, *_ in plan if rid in sidecar))

    new_records = []

    def finish(i, record):
        rid, value, net, cfg, _ = plan[i]
        rows[rid] = record_row(rid, spec.param, value, cfg, record)
        sidecar[rid] = _sidecar_line(rid, record)
        new_records.append(record)
        log.info("run %s (%s=%s, m=%d, seed=%d): %s", rid, spec.param, value,
                 cfg.precision.mantissa_bits, cfg.seed, rows[rid][8])
        flush()

    flush()
    if datasets is not None:
        _DATA["train"], _DATA["test"] = datasets
    elif jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(data_dir, subset, test_subset)) as pool:
            futures = {pool.submit(_train_cell, (net, cfg)): i for i, net, cfg in todo}
            for fut in as_completed(futures):
                finish(futures[fut], fut.result())
        return new_records
    elif todo:
        _init_worker(data_dir, subset, test_subset)
    for i, net, cfg in todo:
        finish(i, _train_cell((net, cfg)))
    return new_records


def _read_sidecar(side: Path, keep_ids) -> dict:
    out = {}
    if side.exists():
        for line in side.read_text().splitlines():
            if line.strip():
                entry = json.loads(line)
                if entry["run_id"] in keep_ids:
                    out[entry["run_id"]] = line
    return out


def _sidecar_line(rid, rec: RunRecord) -> str:
    return json.dumps({
        "run_id": rid,
        "config": rec.config,
        "accuracies": rec.accuracies,
        "epochs_to_90": rec.epochs_to(CONVERGENCE_THRESHOLD),
        "status": rec.status,
        "diverged_epoch": rec.diverged_epoch,
        "wall_time_s": round(rec.wall_time, 3),
    }, sort_keys=True)


def prop1_report(eps_values, layer_counts, kernel=2, weight=1.0, input_magnitude=1.0, truncation_bits=7):
    base = analysis.ConvStackModel(input_magnitude, ((kernel, kernel, weight),))
    rep = analysis.forward_error_scaling_report(base, eps_values, layer_counts, truncation_bits)
    rows = [[r.n, r.eps, r.predicted, r.measured, r.ratio, r.truncation_error] for r in rep.rows]
    return rows, rep


def backprop_report(samples: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    cases = [(0.5, 0.5, 0.1), (0.3, 0.7, 0.0)]
    cases += list(zip(rng.uniform(-1, 1, samples), rng.uniform(0.01, 0.99, samples), rng.uniform(-0.1, 0.1, samples)))
    rows = []
    for g, y, e in cases:
        exact, terms = analysis.backprop_error_expansion(analysis.BackpropErrorCase(float(g), float(y), float(e)))
        s1 = analysis.step1_output_error(float(y), float(y + g), float(e))
        rows.append([g, y, e, exact, *terms, exact - sum(terms), s1.literal, s1.stated])
    return rows


def write_table(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows([[repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row] for row in rows])
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def _csv_list(kind):
    def parse(text):
        return [kind(v) for v in str(text).split(",") if v.strip() != ""]
    return parse


def _int_range(text):
    """``1..4`` or ``1,2,5``."""
    text = str(text)
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return _csv_list(int)(text)


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` comments; keys may use dashes or underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rpemu",
        description="Reduced-precision CNN sweeps on MNIST and round-off error reports.",
    )
    p.add_argument("--config", help="flat key=value file; command-line flags take precedence")
    p.add_argument("--data-dir", help="directory holding the MNIST IDX files (raw or .gz)")
    p.add_argument("--out", default="-", help="output CSV path ('-' for stdout; reports only)")
    p.add_argument("--report", choices=["prop1", "backprop"], help="emit an error-analysis table instead of training")
    p.add_argument("--sweep", choices=SWEEPS, help="training parameter to sweep")
    p.add_argument("--values", type=_csv_list(str), help="comma-separated values for the swept parameter")
    p.add_argument("--mantissa-bits", type=_csv_list(int), default=[23])
    p.add_argument("--rounding", choices=[r.value for r in Rounding], default="truncate")
    p.add_argument("--granularity", choices=[g.value for g in Granularity], default="batch")
    p.add_argument("--quantize-every", choices=["batch", "epoch"], default="batch")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=_csv_list(int), default=[0], help="one or more replicate seeds")
    p.add_argument("--subset", type=int, default=10_000, help="training samples used (desk-scale profile)")
    p.add_argument("--test-subset", type=int, default=None, help="test samples used (default: all 10000)")
    p.add_argument("--full", action="store_true", help="full-scale profile: all 60000 training images, 50 epochs")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--rmsprop-decay", type=float, default=0.9)
    p.add_argument("--rmsprop-eps", type=float, default=1e-8)
    p.add_argument("--init-scale", type=float, default=0.05)
    p.add_argument("--init-perturbation", type=float, default=0.0)
    p.add_argument("--dense-layers", type=int, default=1)
    p.add_argument("--dense-units", type=int, default=100)
    p.add_argument("--conv-filters", type=_csv_list(int), default=[8, 16])
    p.add_argument("--conv-kernel", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--eps", type=_csv_list(float), default=[1e-8, 1e-7, 1e-6, 1e-5, 1e-4])
    p.add_argument("--layers", type=_int_range, default=[1, 2, 3, 4])
    p.add_argument("--kernel", type=int, default=2, help="filter size for the prop1 report")
    p.add_argument("--weight", type=float, default=1.0, help="kernel magnitude for the prop1 report")
    p.add_argument("--input", type=float, default=1.0, help="input magnitude for the prop1 report")
    p.add_argument("--samples", type=int, default=1000, help="random cases for the backprop report")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_args(argv=None):
    parser = build_parser()
    first, _ = parser.parse_known_args(argv)
    if first.config:
        file_values = read_config_file(first.config)
        known = {a.dest: a for a in parser._actions}
        defaults = {}
        for key, raw in file_values.items():
            if key not in known:
                parser.error(f"unknown key {key!r} in {first.config}")
            action = known[key]
            if action.type is not None:
                defaults[key] = action.type(raw)
            elif action.const is True:
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = raw
        parser.set_defaults(**defaults)
    return parser.parse_args(argv)


def sweep_from_args(args) -> SweepSpec:
    epochs, subset = args.epochs, args.subset
    network = NetworkSpec(
        conv_layers=tuple(ConvLayerSpec(f, (args.conv_kernel, args.conv_kernel)) for f in args.conv_filters),
        dense_layers=args.dense_layers,
        dense_units=args.dense_units,
    )
    base = TrainConfig(
        batch_size=args.batch_size,
        epochs=epochs,
        learning_rate=args.lr,
        rmsprop_decay=args.rmsprop_decay,
        rmsprop_epsilon=args.rmsprop_eps,
        init_scale=args.init_scale,
        init_perturbation=args.init_perturbation,
        quantize_every=args.quantize_every,
        precision=PrecisionConfig(args.mantissa_bits[0], args.rounding, args.granularity),
    )
    if args.sweep is None:
        return SweepSpec("none", ("-",), tuple(args.mantissa_bits), tuple(args.seed), base, network)
    values = args.values
    if values is None and args.sweep == "bitsize":
        values = [str(m + 9) for m in args.mantissa_bits]
    if not values:
        raise ValueError("sweep value list is empty; pass --values")
    return SweepSpec(args.sweep, tuple(values), tuple(args.mantissa_bits), tuple(args.seed), base, network)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.full:
        args.subset = None
        if "--epochs" not in (argv if argv is not None else sys.argv[1:]):
            args.epochs = 50

    if args.report == "prop1":
        rows, _ = prop1_report(args.eps, args.layers, args.kernel, args.weight, args.input)
        write_table(args.out, PROP1_COLUMNS, rows)
        return 0
    if args.report == "backprop":
        write_table(args.out, BACKPROP_COLUMNS, backprop_report(args.samples, args.seed[0]))
        return 0

    try:
        spec = sweep_from_args(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out in (None, "-"):
        print("error: sweeps need --out FILE", file=sys.stderr)
        return 2
    if not args.data_dir:
        print("error: --data-dir is required for training runs", file=sys.stderr)
        return 2
    run_sweep(spec, args.out, args.data_dir, args.subset, args.test_subset, args.jobs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
