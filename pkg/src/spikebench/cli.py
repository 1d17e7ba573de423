"""Command-line entry point: one subcommand per pipeline stage.

    spikebench prepare-data | train | convert | simulate | sweep | balance | partition | report

Outputs go under ``--out`` (default ``$SPIKEBENCH_OUT`` or ``./out``). Values
from ``--config`` win over flags for every key the file sets.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    DEFAULT_RELAX,
    balanced_point,
    best_point,
    comparison_report,
    duration_grid,
    estimate_energy,
    fit_latency,
    gnuplot_data,
    read_measurements,
    read_sweep,
    sweep,
    sweep_to_csv,
)
from .config import RunConfig, load_config
from .convert import convert
from .data import (
    AugmentConfig,
    edge_detect_dataset,
    load_any,
    prepare_rgb_directory,
    random_subset,
    split,
    write_csv,
    write_idx,
)
from .errors import SpikeBenchError
from .network import load as load_network
from .nn.models import build_model, init_params
from .nn.train import evaluate, train
from .nn.weights import load_weights, save_weights
from .partition import REFERENCE_CORES, audit, format_plan, partition_network, plan_csv
from .snn import SpikeTraceWriter, afr, simulate

OUT_ENV = "SPIKEBENCH_OUT"
log = logging.getLogger("spikebench")


class UsageError(Exception):
    """Bad command-line usage detected after parsing (exit 2)."""


# ---------------------------------------------------------------------------
# helpers


def parse_durations(text: str) -> list:
    """``start:stop:step`` (inclusive), ``a,b,c`` or a single integer."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) == 2:
                parts.append(1)
            if len(parts) != 3:
                raise ValueError
            return duration_grid(*parts)
        values = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad duration spec {text!r}; use start:stop:step") from None
    if not values or min(values) < 1 or any(b <= a for a, b in zip(values, values[1:])):
        raise argparse.ArgumentTypeError("durations must be positive and strictly increasing")
    return values


def _file_digest(path) -> str:
    h = hashlib.sha256()
    for part in str(path).split(","):
        with open(part, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()[:16]


class Context:
    def __init__(self, args, cfg: RunConfig, explicit_config: bool):
        self.args = args
        self.cfg = cfg
        self.explicit_config = explicit_config
        out = self.pick(args.out, "run", "out_dir") or os.environ.get(OUT_ENV) or "out"
        self.out = Path(out)
        self.inputs = {}

    def pick(self, flag_value, section, key):
        """Config value if the file set it, else the flag, else the config default."""
        if self.explicit_config and self.cfg.is_set(section, key):
            return self._cfg_value(section, key)
        if flag_value is not None:
            return flag_value
        return self._cfg_value(section, key)

    def _cfg_value(self, section, key):
        return self.cfg.as_dict()[section][key]

    @property
    def seed(self) -> int:
        return int(self.pick(getattr(self.args, "seed", None), "run", "seed"))

    def note_input(self, label, path):
        self.inputs[label] = f"{Path(str(path).split(',')[0]).name} sha256:{_file_digest(path)}"

    def provenance(self) -> dict:
        return {
            "tool": f"spikebench {__version__}",
            "command": self.args.command,
            "config": self.cfg.digest(),
            "seed": self.seed,
            "inputs": dict(self.inputs),
        }

    def header_lines(self) -> list:
        p = self.provenance()
        lines = [p["tool"], f"command {p['command']}", f"config {p['config']}", f"seed {p['seed']}"]
        lines += [f"input {k} {v}" for k, v in sorted(p["inputs"].items())]
        return lines

    def path(self, name) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def write_text(self, name, body: str, comment="#") -> Path:
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.header_lines():
                fh.write(f"{comment} {line}\n")
            fh.write(body)
            if not body.endswith("\n"):
                fh.write("\n")
        return path


def _load_data(ctx: Context, path, num_classes, split_name="test"):
    if path is None:
        raise UsageError("a dataset path is required (--data)")
    ctx.note_input(split_name, path)
    return load_any(path, num_classes, split_name)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare_data(ctx: Context):
    a = ctx.args
    if (a.rgb_dir is None) == (a.input is None):
        raise UsageError("give exactly one of --rgb-dir or --input")
    if a.rgb_dir is not None:
        ds = prepare_rgb_directory(a.rgb_dir, a.num_classes)
    else:
        num_classes = ctx.pick(a.num_classes, "data", "num_classes") or None
        ds = _load_data(ctx, a.input, num_classes, "train")
    subset = ctx.pick(a.subset, "data", "subset")
    if subset:
        ds = random_subset(ds, subset, ctx.seed)
    if a.edge is not None or (ctx.explicit_config and ctx.cfg.is_set("data", "edge_threshold")):
        ds = edge_detect_dataset(ds, float(ctx.pick(a.edge, "data", "edge_threshold")))

    if a.test_fraction:
        train_ds, test_ds = split(ds, a.test_fraction, ctx.seed, names=("train", "test"))
        parts = {f"{a.name}-train": train_ds, f"{a.name}-test": test_ds}
    else:
        parts = {a.name: ds}
    for stem, part in parts.items():
        if a.format == "csv":
            path = ctx.path(f"{stem}.csv")
            write_csv(part, path, comments=ctx.header_lines())
        else:
            path = ctx.path(f"{stem}-images-idx3-ubyte.gz")
            write_idx(part, path, ctx.path(f"{stem}-labels-idx1-ubyte.gz"))
            with open(ctx.path(f"{stem}.provenance.json"), "w", encoding="utf-8") as fh:
                json.dump(ctx.provenance(), fh, indent=2, sort_keys=True)
        print(f"{path}: {len(part)} samples, {part.num_classes} classes, sparsity {part.sparsity():.3f}")
    return 0


def cmd_train(ctx: Context):
    a = ctx.args
    cfg = ctx.cfg
    num_classes = ctx.pick(a.num_classes, "data", "num_classes") or None
    data_path = ctx.pick(a.data, "data", "train") or None
    pool = _load_data(ctx, data_path, num_classes, "train")
    subset = ctx.pick(a.subset, "data", "subset")
    if subset:
        pool = random_subset(pool, subset, ctx.seed)
    val_fraction = ctx.pick(a.val_fraction, "data", "val_fraction")
    train_ds, val_ds = split(pool, val_fraction, ctx.seed)

    tc = dataclasses.replace(
        cfg.train_config(),
        epochs=ctx.pick(a.epochs, "train", "epochs"),
        batch_size=ctx.pick(a.batch_size, "train", "batch_size"),
        learning_rate=ctx.pick(a.lr, "train", "learning_rate"),
        seed=ctx.seed,
    )
    if a.augment and tc.augment is None and not (ctx.explicit_config and cfg.is_set("augment", "enabled")):
        tc = dataclasses.replace(tc, augment=AugmentConfig(seed=ctx.seed))

    model = build_model(a.arch, pool.num_classes, a.constrained, a.width_scale)
    params = init_params(model, ctx.seed)
    best, history = train(model, params, train_ds, val_ds, tc)

    stem = a.name or (f"{a.arch}-c" if a.constrained else a.arch)
    weights = ctx.path(f"{stem}.sbnw")
    save_weights(model, best, weights, ctx.provenance())
    rows = "epoch,loss,accuracy,val_loss,val_accuracy\n" + "".join(
        f"{h['epoch']},{h['loss']!r},{h['accuracy']!r},{h['val_loss']!r},{h['val_accuracy']!r}\n" for h in history
    )
    ctx.write_text(f"{stem}-history.csv", rows)
    print(f"{weights}: {model.param_count()} parameters, {len(history)} epochs")
    if a.test:
        test = _load_data(ctx, a.test, pool.num_classes, "test")
        m = evaluate(model, best, test)
        print(f"test accuracy {m['accuracy']:.4f}")
    return 0


def cmd_convert(ctx: Context):
    a = ctx.args
    cfg = ctx.cfg
    ctx.note_input("weights", a.weights)
    model, params = load_weights(a.weights)
    calib = _load_data(ctx, a.calibration, model.num_classes, "train")
    size = ctx.pick(a.calibration_size, "convert", "calibration_size")
    if size < len(calib):
        calib = random_subset(calib, size, ctx.seed)
    cc = dataclasses.replace(
        cfg.convert,
        percentile=ctx.pick(a.percentile, "convert", "percentile"),
        duration=ctx.pick(a.duration, "convert", "duration"),
    )
    net = convert(model, params, calib, cc)
    net.provenance.update(ctx.provenance())
    out = ctx.path(f"{Path(a.weights).stem}.sbsn")
    net.save(out)
    print(f"{out}: {len(net.layers)} spiking layers, {net.neuron_count()} neurons")
    for name in net.provenance.get("degenerate_layers", []):
        print(f"warning: layer {name} never activated during calibration")
    return 0


def cmd_simulate(ctx: Context):
    a = ctx.args
    ctx.note_input("model", a.model)
    net = load_network(a.model)
    ds = _load_data(ctx, a.data, net.num_classes)
    T = a.duration if a.duration is not None else int(net.config.get("duration", 100))
    stem = Path(a.model).stem
    trace = None
    if a.trace is not None:
        if not 0 <= a.trace < len(ds):
            raise UsageError(f"--trace index {a.trace} outside dataset of {len(ds)}")
        fh = open(ctx.path(f"{stem}-trace.csv"), "w", newline="", encoding="utf-8")
        trace = SpikeTraceWriter(fh, [l.name for l in net.layers])
        try:
            simulate(net, ds.images[a.trace][None], [T], trace=trace)
        finally:
            fh.close()
    preds, spikes = [], []
    for i in range(0, len(ds), a.batch_size):
        (bc,) = simulate(net, ds.images[i:i + a.batch_size], [T])
        preds.append(bc.predictions())
        spikes.append(bc.total_spikes())
    preds = np.concatenate(preds)
    spikes = np.concatenate(spikes)
    M = net.neuron_count()
    body = "index,label,predicted,spikes,afr\n" + "".join(
        f"{i},{int(y)},{int(p)},{int(s)},{afr(int(s), 1, M, T)!r}\n"
        for i, (y, p, s) in enumerate(zip(ds.labels, preds, spikes))
    )
    path = ctx.write_text(f"{stem}-simulate.csv", body)
    acc = float((preds == ds.labels).mean())
    print(f"{path}: accuracy {acc:.4f} at duration {T}, mean spikes {spikes.mean():.1f}")
    return 0


def cmd_sweep(ctx: Context):
    a = ctx.args
    ctx.note_input("model", a.model)
    net = load_network(a.model)
    ds = _load_data(ctx, a.data, net.num_classes)
    jobs = ctx.pick(a.jobs, "run", "jobs")
    points = sweep(net, ds, a.durations, jobs=jobs, timing_samples=a.timing_samples)
    path = ctx.path(f"{a.name}.csv")
    path.write_text(sweep_to_csv(points, ctx.header_lines()), encoding="utf-8")
    msg = f"{path}: {len(points)} points"
    fit = None
    if len({p.duration for p in points}) >= 2:
        fit = fit_latency(points)
        msg += f"; latency_ms = {fit.slope:.5f} * duration + {fit.intercept:.4f} (R2 {fit.r2:.4f})"
    if a.gnuplot:
        ctx.write_text(f"{a.name}.dat", gnuplot_data(points, fit))
    best = best_point(points)
    print(msg)
    print(f"best: duration {best.duration} accuracy {best.accuracy:.4f}")
    return 0


def _fmt_point(tag, p):
    return (f"{tag}: duration {p.duration} accuracy {p.accuracy:.4f} "
            f"latency_ms {p.latency_ms:.4f} mean_spikes {p.mean_spikes:.1f}")


def cmd_balance(ctx: Context):
    a = ctx.args
    points = read_sweep(a.sweep)
    if not points:
        raise SpikeBenchError(f"{a.sweep}: no sweep rows")
    print(_fmt_point("best", best_point(points)))
    print(_fmt_point(f"balanced (relax {a.relax:g})", balanced_point(points, a.relax)))
    return 0


def cmd_partition(ctx: Context):
    a = ctx.args
    ctx.note_input("model", a.model)
    net = load_network(a.model)
    plan = partition_network(net, ctx.cfg.budget)
    problems = audit(plan)
    ref = REFERENCE_CORES.get(net.provenance.get("arch", ""), {}) if net.num_classes == 24 else {}
    text = format_plan(plan, ref)
    if problems:
        text += "\nVIOLATIONS:\n" + "\n".join(problems)
    stem = Path(a.model).stem
    ctx.write_text(f"{stem}-partition.txt", text)
    if a.csv:
        ctx.write_text(f"{stem}-partition.csv", plan_csv(plan))
    print(text)
    return 1 if problems else 0


def _accuracy_map(items):
    out = {}
    for item in items or []:
        name, _, value = item.partition("=")
        try:
            out[name] = float(value)
        except ValueError:
            raise UsageError(f"expected model=accuracy, got {item!r}") from None
    return out


def cmd_report(ctx: Context):
    a = ctx.args
    hw = []
    if a.hw:
        ctx.note_input("hw", a.hw)
        hw = read_measurements(a.hw)
    snn_acc = _accuracy_map(a.snn_accuracy)
    estimates, extra = {}, ""
    if a.sweep:
        if not a.model:
            raise UsageError("--sweep needs --model for the neuron count")
        ctx.note_input("sweep", a.sweep)
        ctx.note_input("model", a.model)
        net = load_network(a.model)
        points = read_sweep(a.sweep)
        M = net.neuron_count()
        name = net.provenance.get("arch", Path(a.model).stem)
        lines = ["", "estimated energy per inference (simulator, not measured)",
                 f"{'duration':>8} {'mean_spikes':>12} {'dynamic_uJ':>11} {'total_uJ':>10}"]
        for p in points:
            e = estimate_energy(p.mean_spikes, M, p.duration, ctx.cfg.energy, p.latency_ms)
            lines.append(f"{p.duration:>8} {p.mean_spikes:>12.1f} {e.dynamic_j * 1e6:>11.4f} {e.total_j * 1e6:>10.4f}")
        bal = balanced_point(points, a.relax)
        e = estimate_energy(bal.mean_spikes, M, bal.duration, ctx.cfg.energy, bal.latency_ms)
        estimates[name] = (e.total_j / (bal.latency_ms * 1e-3) * 1e3, bal.latency_ms)
        snn_acc.setdefault(name, bal.accuracy)
        extra = "\n".join(lines)
    report = comparison_report(_accuracy_map(a.ann_accuracy), snn_acc, hw, estimates)
    text = report.to_text() + ("\n" + extra if extra else "")
    ctx.write_text(f"{a.name}.txt", text)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikebench", description="ANN-to-SNN conversion and benchmarking toolkit")
    p.add_argument("--version", action="version", version=f"spikebench {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(sp):
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./out)")
        sp.add_argument("--config", default=None, help="INI run configuration; its keys override flags")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("prepare-data", help="resize RGB dumps, subset, edge-detect or split a dataset"))
    s.add_argument("--rgb-dir", help="directory of <label>/*.rgb planar dumps")
    s.add_argument("--input", help="CSV file or IDX images path")
    s.add_argument("--num-classes", type=int, default=None)
    s.add_argument("--subset", type=int, default=None)
    s.add_argument("--edge", type=float, default=None, metavar="THRESHOLD")
    s.add_argument("--test-fraction", type=float, default=None)
    s.add_argument("--format", choices=("csv", "idx"), default="csv")
    s.add_argument("--name", default="dataset")

    s = common(sub.add_parser("train", help="train one architecture"))
    s.add_argument("--arch", required=True, choices=("mlp", "lenet", "alexnet", "vggnet"))
    s.add_argument("--constrained", action="store_true")
    s.add_argument("--width-scale", type=float, default=1.0)
    s.add_argument("--data", default=None)
    s.add_argument("--test", default=None)
    s.add_argument("--num-classes", type=int, default=None)
    s.add_argument("--subset", type=int, default=None)
    s.add_argument("--val-fraction", type=float, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--augment", action="store_true")
    s.add_argument("--name", default=None)

    s = common(sub.add_parser("convert", help="convert trained weights to a spiking network"))
    s.add_argument("--weights", required=True)
    s.add_argument("--calibration", required=True, help="dataset used for activation statistics")
    s.add_argument("--calibration-size", type=int, default=None)
    s.add_argument("--percentile", type=float, default=None)
    s.add_argument("--duration", type=int, default=None)

    s = common(sub.add_parser("simulate", help="classify a dataset with a spiking network"))
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--duration", type=int, default=None)
    s.add_argument("--trace", type=int, default=None, metavar="INDEX", help="dump a spike trace of one sample")
    s.add_argument("--batch-size", type=int, default=250)
    s.add_argument("--jobs", type=int, default=None)

    s = common(sub.add_parser("sweep", help="accuracy and latency over a duration grid"))
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--durations", type=parse_durations, default=duration_grid())
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--timing-samples", type=int, default=8)
    s.add_argument("--gnuplot", action="store_true")
    s.add_argument("--name", default="sweep")

    s = common(sub.add_parser("balance", help="best and balanced operating points of a sweep"))
    s.add_argument("--sweep", required=True)
    s.add_argument("--relax", type=float, default=DEFAULT_RELAX)

    s = common(sub.add_parser("partition", help="place a spiking network onto neuro-cores"))
    s.add_argument("--model", required=True)
    s.add_argument("--csv", action="store_true")

    s = common(sub.add_parser("report", help="platform comparison with measured and estimated rows"))
    s.add_argument("--hw", help="measurement CSV: source,model,idle_mw,running_mw,latency_ms")
    s.add_argument("--sweep")
    s.add_argument("--model")
    s.add_argument("--relax", type=float, default=DEFAULT_RELAX)
    s.add_argument("--ann-accuracy", action="append", metavar="MODEL=ACC")
    s.add_argument("--snn-accuracy", action="append", metavar="MODEL=ACC")
    s.add_argument("--name", default="report")
    return p


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "convert": cmd_convert,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "balance": cmd_balance,
    "partition": cmd_partition,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        ctx = Context(args, cfg, args.config is not None)
        return COMMANDS[args.command](ctx)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spikebench: error: {exc}", file=sys.stderr)
        return 2
    except (SpikeBenchError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"spikebench {args.command}: error: {msg}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
