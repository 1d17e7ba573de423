"""Duration sweeps, latency fits, operating-point selection, energy estimates and reports."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import DataError, DegenerateFitError
from .network import SpikingNetwork
from .snn import SimResult, simulate

SWEEP_COLUMNS = ("duration", "accuracy", "latency_ms", "mean_spikes")
HW_COLUMNS = ("source", "model", "idle_mw", "running_mw", "latency_ms")
DEFAULT_RELAX = 0.02
SPIKING_SOURCES = ("loihi", "snn", "sim")
# accuracies within this of a threshold count as meeting it (guards float noise)
ACC_TOL = 1e-12


@dataclass(frozen=True)
class SweepPoint:
    duration: int
    accuracy: float
    latency_ms: float
    mean_spikes: float = 0.0

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must be a fraction in [0, 1]")
        if not self.latency_ms > 0:
            raise ValueError("latency must be positive")


@dataclass(frozen=True)
class LatencyFit:
    slope: float
    intercept: float
    r2: float

    def predict(self, duration):
        return self.slope * np.asarray(duration, dtype=np.float64) + self.intercept


def duration_grid(start: int = 5, stop: int = 300, step: int = 5) -> list:
    """Inclusive grid ``start, start+step, ..., <= stop``."""
    if start < 1 or step < 1 or stop < start:
        raise ValueError("need 1 <= start <= stop and step >= 1")
    return list(range(start, stop + 1, step))


def _check_durations(durations) -> list:
    d = [int(x) for x in durations]
    if not d:
        raise ValueError("no durations given")
    if d[0] < 1 or any(b <= a for a, b in zip(d, d[1:])):
        raise ValueError("durations must be strictly increasing and >= 1")
    return d


def _count_chunk(args):
    net, images, labels, durations = args
    res = simulate(net, images, durations)
    correct = np.array([int((bc.predictions() == labels).sum()) for bc in res])
    spikes = np.array([int(bc.total_spikes().sum()) for bc in res])
    return correct, spikes


def sweep_counts(network: SpikingNetwork, test: Dataset, durations, jobs: int = 1, batch_size: int = 250):
    """Correct predictions and total spikes per duration over the whole test set.

    Chunks are summed in index order, so the result does not depend on ``jobs``.
    """
    durations = _check_durations(durations)
    if test is None or len(test) == 0:
        raise ValueError("cannot sweep an empty dataset")
    chunks = [(network, test.images[i:i + batch_size], test.labels[i:i + batch_size], durations)
              for i in range(0, len(test), batch_size)]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_count_chunk, chunks))
    else:
        parts = [_count_chunk(c) for c in chunks]
    correct = np.sum([p[0] for p in parts], axis=0)
    spikes = np.sum([p[1] for p in parts], axis=0)
    return durations, correct, spikes


def time_inference(network: SpikingNetwork, images, durations, repeats: int = 1) -> dict:
    """Mean single-sample wall time (ms) per duration, measured serially."""
    out = {}
    images = np.asarray(images)
    for d in durations:
        t0 = time.perf_counter()
        for _ in range(repeats):
            for img in images:
                simulate(network, img[None], [d])
        elapsed = time.perf_counter() - t0
        out[d] = max(elapsed * 1000.0 / (len(images) * repeats), 1e-9)
    return out


def sweep(network: SpikingNetwork, test: Dataset, durations=None, jobs: int = 1,
          timing_samples: int = 8, batch_size: int = 250) -> list:
    """One :class:`SweepPoint` per duration.

    Accuracy and spike counts come from the full test split. Latency comes
    from a separate serial timing pass over the first ``timing_samples``
    images, so worker contention does not skew it.
    """
    durations = _check_durations(duration_grid() if durations is None else durations)
    durations, correct, spikes = sweep_counts(network, test, durations, jobs, batch_size)
    n = len(test)
    k = max(1, min(timing_samples, n))
    lat = time_inference(network, test.images[:k], durations)
    return [SweepPoint(d, float(c) / n, lat[d], float(s) / n) for d, c, s in zip(durations, correct, spikes)]


def ols(x, y):
    """Least-squares line through ``(x, y)``: ``(slope, intercept, r2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DegenerateFitError("need at least two points")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise DegenerateFitError("all durations are equal; slope is undefined")
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    intercept = ym - slope * xm
    ss_tot = float(((y - ym) ** 2).sum())
    ss_res = float(((y - (slope * x + intercept)) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return slope, float(intercept), r2


def fit_latency(points) -> LatencyFit:
    return LatencyFit(*ols([p.duration for p in points], [p.latency_ms for p in points]))


def best_point(points) -> SweepPoint:
    """Highest accuracy; ties go to the shorter duration."""
    if not points:
        raise ValueError("no sweep points")
    return min(points, key=lambda p: (-p.accuracy, p.duration))


def balanced_point(points, relax: float = DEFAULT_RELAX) -> SweepPoint:
    """Shortest duration whose accuracy is at least ``best - relax`` (fractions)."""
    if relax < 0:
        raise ValueError("relax must be non-negative")
    best = best_point(points)
    floor = best.accuracy - relax - ACC_TOL
    ok = [p for p in points if p.accuracy >= floor]
    return min(ok, key=lambda p: (p.duration, -p.accuracy))


# ---------------------------------------------------------------------------
# Energy


@dataclass(frozen=True)
class EnergyModel:
    e_spike: float = 23.6e-12  # J per synaptic event
    e_step: float = 52e-12  # J per neuron per timestep
    static_power_mw: float = 0.0

    def __post_init__(self):
        if min(self.e_spike, self.e_step, self.static_power_mw) < 0:
            raise ValueError("energy coefficients must be non-negative")


@dataclass(frozen=True)
class EnergyEstimate:
    spike_j: float
    step_j: float
    static_j: float
    label: str = "estimated"

    @property
    def dynamic_j(self) -> float:
        return self.spike_j + self.step_j

    @property
    def total_j(self) -> float:
        return self.dynamic_j + self.static_j


def estimate_energy(result, M: int, T: int, model: EnergyModel | None = None,
                    wall_latency_ms: float = 0.0) -> EnergyEstimate:
    """``e_spike*N + e_step*M*T + static_power*latency``; always tagged as an estimate.

    ``result`` is a :class:`SimResult` or a spike count.
    """
    model = model or EnergyModel()
    n = result.n_spikes if isinstance(result, SimResult) else float(result)
    return EnergyEstimate(
        model.e_spike * n,
        model.e_step * M * T,
        model.static_power_mw * 1e-3 * wall_latency_ms * 1e-3,
    )


# ---------------------------------------------------------------------------
# Hardware comparison


@dataclass(frozen=True)
class HardwareMeasurement:
    source: str
    model: str
    idle_mw: float
    running_mw: float
    latency_ms: float

    def __post_init__(self):
        if self.idle_mw < 0 or self.running_mw < self.idle_mw:
            raise DataError(f"{self.source}/{self.model}: need running >= idle >= 0 "
                            f"(idle {self.idle_mw}, running {self.running_mw})")
        if self.latency_ms < 0:
            raise DataError(f"{self.source}/{self.model}: negative latency")

    @property
    def inference_power_mw(self) -> float:
        return self.running_mw - self.idle_mw

    @property
    def energy_mj(self) -> float:
        # mW * ms = uJ
        return self.inference_power_mw * self.latency_ms * 1e-3


def parse_measurements(text: str) -> list:
    rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    if rows.fieldnames is None or tuple(rows.fieldnames) != HW_COLUMNS:
        raise DataError(f"measurement CSV must have columns {','.join(HW_COLUMNS)}")
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            out.append(HardwareMeasurement(r["source"], r["model"], float(r["idle_mw"]),
                                           float(r["running_mw"]), float(r["latency_ms"])))
        except DataError:
            raise
        except (TypeError, ValueError) as exc:
            raise DataError(f"line {i}: {exc}") from None
    return out


def read_measurements(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return parse_measurements(fh.read())


@dataclass
class ReportRow:
    source: str
    model: str
    accuracy: float | None
    power_mw: float | None
    latency_ms: float | None
    energy_mj: float | None
    kind: str  # measured | estimated


@dataclass
class BenchReport:
    rows: list
    ratios: list = field(default_factory=list)  # (model, a, b, power, latency, energy)

    def to_text(self) -> str:
        def f(v, spec):
            return "-".rjust(int(spec.split(".")[0])) if v is None else format(v, spec)

        lines = [f"{'source':<8} {'model':<10} {'acc':>7} {'power_mW':>10} {'lat_ms':>9} "
                 f"{'energy_mJ':>10} kind"]
        for r in self.rows:
            lines.append(f"{r.source:<8} {r.model:<10} {f(r.accuracy, '7.4f')} {f(r.power_mw, '10.2f')} "
                         f"{f(r.latency_ms, '9.3f')} {f(r.energy_mj, '10.4f')} {r.kind}")
        if self.ratios:
            lines.append("")
            lines.append(f"{'model':<10} {'ratio':<16} {'power':>8} {'latency':>8} {'energy':>8}")
            for model, a, b, pw, lt, en in self.ratios:
                lines.append(f"{model:<10} {a + '/' + b:<16} {f(pw, '8.2f')} {f(lt, '8.2f')} {f(en, '8.2f')}")
        return "\n".join(lines)


def _ratio(a, b):
    if a is None or b is None or b == 0:
        return None
    return a / b


def comparison_report(ann_metrics: dict | None = None, snn_metrics: dict | None = None,
                      hw: list | None = None, estimates: dict | None = None) -> BenchReport:
    """Per model and platform: accuracy, inference power, latency and energy.

    ``ann_metrics``/``snn_metrics`` map model name to accuracy and are matched
    to measurement rows whose source is not / is a spiking platform
    (see ``SPIKING_SOURCES``, case-insensitive). ``estimates`` maps model
    name to ``(power_mw, latency_ms)`` derived from the simulator and is
    reported with kind ``estimated``. Ratios compare every pair of sources
    that measured the same model.
    """
    ann_metrics = ann_metrics or {}
    snn_metrics = snn_metrics or {}
    hw = list(hw or [])
    estimates = estimates or {}
    if not (ann_metrics or snn_metrics or hw or estimates):
        raise ValueError("nothing to report")

    def spiking(source):
        return source.lower() in SPIKING_SOURCES

    def acc_for(source, model):
        return (snn_metrics if spiking(source) else ann_metrics).get(model)

    rows = [ReportRow(m.source, m.model, acc_for(m.source, m.model), m.inference_power_mw,
                      m.latency_ms, m.energy_mj, "measured") for m in hw]
    for model, (pw, lt) in sorted(estimates.items()):
        rows.append(ReportRow("sim", model, snn_metrics.get(model), pw, lt, pw * lt * 1e-3, "estimated"))
    for src, metrics in (("ann", ann_metrics), ("snn", snn_metrics)):
        for model, acc in sorted(metrics.items()):
            covered = any(r.model == model and spiking(r.source) == (src == "snn") for r in rows)
            if not covered:
                rows.append(ReportRow(src, model, acc, None, None, None, "accuracy-only"))

    ratios = []
    models = []
    for r in rows:
        if r.model not in models:
            models.append(r.model)
    for model in models:
        side = [r for r in rows if r.model == model and r.power_mw is not None]
        for i in range(len(side)):
            for j in range(i + 1, len(side)):
                a, b = side[i], side[j]
                ratios.append((model, a.source, b.source, _ratio(a.power_mw, b.power_mw),
                               _ratio(a.latency_ms, b.latency_ms), _ratio(a.energy_mj, b.energy_mj)))
    return BenchReport(rows, ratios)


# ---------------------------------------------------------------------------
# Sweep files


def sweep_to_csv(points, header_lines=()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for p in points:
        w.writerow([p.duration, repr(p.accuracy), repr(p.latency_ms), repr(p.mean_spikes)])
    return buf.getvalue()


def read_sweep(path) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = csv.DictReader(lines)
    if rows.fieldnames is None or tuple(rows.fieldnames) != SWEEP_COLUMNS:
        raise DataError(f"sweep CSV must have columns {','.join(SWEEP_COLUMNS)}")
    try:
        return [SweepPoint(int(r["duration"]), float(r["accuracy"]), float(r["latency_ms"]),
                           float(r["mean_spikes"])) for r in rows]
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad sweep row: {exc}") from None


def gnuplot_data(points, fit: LatencyFit | None = None) -> str:
    """Whitespace columns: duration accuracy latency_ms [fitted_latency_ms]."""
    lines = ["# duration accuracy latency_ms" + (" fit_ms" if fit else "")]
    for p in points:
        row = f"{p.duration} {p.accuracy:.6f} {p.latency_ms:.6f}"
        if fit:
            row += f" {float(fit.predict(p.duration)):.6f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def mean_sim_power_mw(energy: EnergyEstimate, wall_latency_ms: float) -> float:
    """Average power implied by an energy estimate over the wall latency."""
    if wall_latency_ms <= 0:
        raise ValueError("latency must be positive")
    return energy.total_j / (wall_latency_ms * 1e-3) * 1e3

