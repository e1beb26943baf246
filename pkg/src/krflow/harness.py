"""Seeded experiment runner: rate curves, coordinate-ordering studies and
sine-frequency sweeps, with CSV/JSON output.

Every random draw comes from a stream keyed by (group, n index, replicate,
purpose), so results do not depend on how tasks are spread over workers.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .core import SeedSpec, check_permutation, ordering_label
from .densities import Density, Gaussian, PermutedDensity, SupportBox, density_from_config
from .kr_exact import kr_to_standard_gaussian
from .metrics import (
    NonPositiveLossError,
    error_bar,
    fit_loglog_slope,
    floor_estimate,
    kl_on_sample,
    sobolev_error,
    sup_grid_error,
    test_nll_estimate,
)
from .objective import LossConfig, OptimizerOptions, optimize
from .param_maps import JacobianFlow, MonotoneMap

CSV_COLUMNS = (
    "experiment",
    "density",
    "ordering",
    "n",
    "replicate",
    "seed_stream",
    "test_nll",
    "mc_kl",
    "sup_err",
    "sobolev_err",
    "iters",
    "converged",
    "wall_ms",
)

TRAIN, TEST, EVAL = 0, 1, 2
EXPERIMENTS = ("rates", "ordering", "sine_frequency", "gradcheck", "oracle")


class ConfigError(ValueError):
    pass


class ExperimentFailure(RuntimeError):
    """More than half of the replicates failed at some sample size."""


def stream_id(group: int, n_index: int, replicate: int, purpose: int) -> int:
    if not (0 <= group < 2**16 and 0 <= n_index < 2**16 and 0 <= replicate < 2**24 and 0 <= purpose < 16):
        raise ValueError("stream coordinates out of range")
    return (((group << 16 | n_index) << 24 | replicate) << 4) | purpose


# -- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    experiment: str
    density: dict
    ordering: object = "12"
    map: dict = field(default_factory=lambda: {"diag_degrees": 2, "tail_degrees": 2, "shift_degrees": 2})
    flow: dict | None = None
    ns: list = field(default_factory=lambda: [1000])
    replicates: int = 1
    test_size: int = 100_000
    seed: int = 0
    optimizer: dict = field(default_factory=lambda: {"max_iters": 5000, "grad_tol": 1e-5})
    output_path: str | None = None
    frequencies: list | None = None
    init: str = "identity"
    oracle_metrics: bool | None = None
    sobolev_mc: int = 10_000
    sup_grid: int = 50
    sup_box: dict | None = None
    record_wall_time: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if not isinstance(self.density, dict) or "kind" not in self.density:
            raise ConfigError("density must be an object with a 'kind' field")
        self.ns = [int(n) for n in self.ns]
        if not self.ns or any(n < 1 for n in self.ns) or any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ConfigError("ns must be a nonempty strictly increasing list of positive integers")
        if int(self.replicates) < 1:
            raise ConfigError("replicates must be >= 1")
        if int(self.test_size) < 1000:
            raise ConfigError("test_size must be >= 1000")
        if self.init not in ("identity", "standardize"):
            raise ConfigError("init must be 'identity' or 'standardize'")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        unknown = set(self.optimizer) - {f for f in OptimizerOptions.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown optimizer options {sorted(unknown)}")
        if self.experiment == "sine_frequency":
            if not self.frequencies or len({len(f) for f in self.frequencies}) != 1:
                raise ConfigError("sine_frequency needs a nonempty 'frequencies' list of equal-length vectors")
        try:
            den = self.base_density()
            self.perms()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad density/ordering: {exc}") from exc
        self.dim = den.dim

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        fields = set(cls.__dataclass_fields__)
        unknown = set(doc) - fields
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def base_density(self):
        """Density used for validation; sine sweeps take their first frequency vector."""
        doc = self.density
        if self.experiment == "sine_frequency":
            doc = dict(doc, kind="sine", freqs=list(self.frequencies[0]))
        return density_from_config(doc)

    def perms(self) -> list[tuple[int, ...]]:
        d = self.base_density().dim
        o = self.ordering
        if o == "both":
            return [tuple(range(d)), tuple(range(d))[::-1]]
        if isinstance(o, str):
            return [check_permutation([int(c) - 1 for c in o], d)]
        if o and isinstance(o[0], (list, tuple)):
            return [check_permutation(p, d) for p in o]
        return [check_permutation(o, d)]


def load_config(path) -> dict:
    """Parse a JSON config; errors carry line and column."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


# -- results -------------------------------------------------------------------


@dataclass
class ResultRow:
    experiment: str
    density: str
    ordering: str
    n: int
    replicate: int
    seed_stream: int
    test_nll: float | None = None
    mc_kl: float | None = None
    sup_err: float | None = None
    sobolev_err: float | None = None
    iters: int = 0
    converged: bool = False
    wall_ms: float | None = None
    sample_hash: str = ""
    group: int = 0
    n_index: int = 0
    error: str = ""

    def sort_key(self):
        return (self.group, self.n_index, self.replicate, self.ordering)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else "%.17g" % v
    return str(v)


def rows_to_csv(rows, record_wall_time: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        vals = [getattr(r, c) for c in CSV_COLUMNS]
        if not record_wall_time:
            vals[-1] = None
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def _density_label(cfg: dict) -> str:
    kind = cfg["kind"]
    if kind == "sine":
        return "sine(" + ",".join(str(k) for k in cfg["freqs"]) + ")"
    if kind == "gaussian_mixture" and "preset" in cfg:
        return cfg["preset"]
    if kind == "gaussian" and "rho" in cfg:
        return f"gaussian(rho={cfg['rho']})"
    return kind


# -- one replicate ---------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    experiment: str
    density: dict
    perm: tuple
    n_index: int
    n: int
    replicate: int
    group: int
    seed: int
    map: dict
    flow: dict | None
    optimizer: dict
    test_size: int
    init: str
    oracle_metrics: bool
    sobolev_mc: int
    sup_grid: int
    sup_box: dict | None


def sample_hash(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest()


def build_model(support: SupportBox, map_cfg: dict, flow_cfg: dict | None, init: str, data):
    template = MonotoneMap.identity(support, **map_cfg)
    if init == "standardize":
        template = template.standardizing(data)
    if flow_cfg:
        return JacobianFlow.alternating(template, int(flow_cfg.get("depth", 2)))
    return template


def has_oracle(f: Density) -> bool:
    return not isinstance(f, PermutedDensity) and f.kind in ("gaussian", "gaussian_mixture", "banana", "product")


def run_task(task: Task) -> ResultRow:
    t0 = time.perf_counter()
    f = density_from_config(task.density)
    perm = list(task.perm)
    seed = lambda purpose: SeedSpec(task.seed, stream_id(task.group, task.n_index, task.replicate, purpose))  # noqa: E731
    row = ResultRow(
        task.experiment,
        _density_label(task.density),
        ordering_label(perm),
        task.n,
        task.replicate,
        seed(TRAIN).stream_id,
        group=task.group,
        n_index=task.n_index,
    )
    x = f.sample(task.n, seed(TRAIN))
    row.sample_hash = sample_hash(x)
    xp = x[:, perm]
    fp = f.permuted(perm)
    g = Gaussian.standard(f.dim)
    try:
        model = build_model(f.support.permuted(perm), task.map, task.flow, task.init, xp)
        res = optimize(model, xp, LossConfig(g), OptimizerOptions(**task.optimizer))
        fitted = model.with_theta(res.theta_hat)
        row.iters, row.converged = res.iterations, res.converged
        test = f.sample(task.test_size, seed(TEST))[:, perm]
        row.test_nll = test_nll_estimate(fitted, test, g).value
        if task.oracle_metrics and has_oracle(fp):
            oracle = kr_to_standard_gaussian(fp)
            row.mc_kl = kl_on_sample(fitted, test, fp, g).value
            if not isinstance(fitted, JacobianFlow):
                box = SupportBox(**task.sup_box).permuted(perm) if task.sup_box else None
                row.sup_err = sup_grid_error(fitted, oracle, task.sup_grid, box)
                row.sobolev_err = sobolev_error(fitted, oracle, fp, task.sobolev_mc, seed(EVAL))
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        row.converged = False
        row.error = f"{type(exc).__name__}: {exc}"
    row.wall_ms = 1000.0 * (time.perf_counter() - t0)
    return row


def execute(tasks, threads: int = 1) -> list[ResultRow]:
    """Run tasks on a bounded pool; results are sorted, not arrival-ordered."""
    if threads <= 1 or len(tasks) <= 1:
        rows = [run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_task, tasks, chunksize=1))
    return sorted(rows, key=ResultRow.sort_key)


def _tasks(cfg: ExperimentConfig, density: dict, group: int = 0, perms=None):
    oracle = cfg.oracle_metrics if cfg.oracle_metrics is not None else cfg.experiment == "rates"
    out = []
    for i, n in enumerate(cfg.ns):
        for r in range(cfg.replicates):
            for perm in perms or cfg.perms():
                out.append(
                    Task(
                        cfg.experiment, density, tuple(perm), i, n, r, group, int(cfg.seed),
                        dict(cfg.map), cfg.flow, dict(cfg.optimizer), int(cfg.test_size), cfg.init,
                        bool(oracle), int(cfg.sobolev_mc), int(cfg.sup_grid), cfg.sup_box,
                    )
                )
    return out


def _write(cfg: ExperimentConfig, name: str, rows, summary: dict, extra: dict | None = None):
    if not cfg.output_path:
        return
    out = Path(cfg.output_path)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.csv").write_text(rows_to_csv(rows, cfg.record_wall_time))
    (out / f"{name}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for fname, text in (extra or {}).items():
        (out / fname).write_text(text)


def _check_failures(rows, key) -> dict:
    by = {}
    for r in rows:
        by.setdefault(key(r), []).append(r)
    return {k: sum(not r.converged for r in v) / len(v) for k, v in by.items()}


# -- experiments -------------------------------------------------------------------


@dataclass
class RatesOutput:
    rows: list
    curve: object
    summary: dict


def run_rates(cfg: ExperimentConfig, threads: int = 1) -> RatesOutput:
    rows = execute(_tasks(cfg, cfg.density), threads)
    use_kl = all(r.mc_kl is not None for r in rows if r.converged)
    metric = "mc_kl" if use_kl else "test_nll"
    ok = [[r for r in rows if r.n == n and r.converged] for n in cfg.ns]
    losses = [[getattr(r, metric) for r in group] for group in ok]
    if use_kl:
        floor = 0.0  # exact-map loss on the same test set is identically zero
    else:
        flat = [v for g in losses for v in g]
        floor = floor_estimate(flat, float(np.std(flat) / math.sqrt(max(len(flat), 1)))) if flat else 0.0
    shifted = [[v - floor for v in g] for g in losses]
    summary = {
        "experiment": "rates",
        "density": _density_label(cfg.density),
        "metric": metric,
        "floor": floor,
        "ns": cfg.ns,
        "failure_fraction": {str(k): v for k, v in _check_failures(rows, lambda r: r.n).items()},
        "mean": [],
        "error_bar_95": [],
    }
    for g in shifted:
        m, h = error_bar(g) if g else (float("nan"), float("nan"))
        summary["mean"].append(m)
        summary["error_bar_95"].append(h)
    curve = None
    if len(cfg.ns) >= 3 and all(shifted):
        try:
            curve = fit_loglog_slope(cfg.ns, shifted)
            summary.update(curve.to_json())
        except NonPositiveLossError as exc:
            summary["slope_error"] = str(exc)
    _write(cfg, "rates", rows, summary)
    _raise_on_failures(rows, summary)
    return RatesOutput(rows, curve, summary)


def _raise_on_failures(rows, summary):
    bad = {k: v for k, v in summary["failure_fraction"].items() if v > 0.5}
    if bad:
        raise ExperimentFailure(f"more than half of the replicates failed at n={sorted(bad)}")


@dataclass
class OrderingOutput:
    rows: list
    pairs: list
    summary: dict


def _paired(rows, perms):
    """Per (group, n, replicate) NLL difference second ordering minus first."""
    a_lab, b_lab = ordering_label(perms[0]), ordering_label(perms[1])
    by = {}
    for r in rows:
        by.setdefault((r.group, r.n, r.replicate), {})[r.ordering] = r
    pairs = []
    for (grp, n, rep), d in sorted(by.items()):
        a, b = d[a_lab], d[b_lab]
        if a.sample_hash != b.sample_hash:
            raise AssertionError(f"paired samples differ at n={n}, replicate={rep}")
        valid = a.converged and b.converged
        pairs.append({
            "group": grp, "n": n, "replicate": rep, "nll_" + a_lab: a.test_nll, "nll_" + b_lab: b.test_nll,
            "diff": (b.test_nll - a.test_nll) if valid else None, "sample_hash": a.sample_hash,
        })
    return pairs


def sign_test(diffs) -> float:
    diffs = [d for d in diffs if d is not None and d != 0]
    if not diffs:
        return 1.0
    k = sum(d > 0 for d in diffs)
    return float(stats.binomtest(k, len(diffs), 0.5).pvalue)


def run_ordering(cfg: ExperimentConfig, threads: int = 1) -> OrderingOutput:
    perms = cfg.perms()
    if len(perms) != 2:
        perms = [tuple(range(cfg.dim)), tuple(range(cfg.dim))[::-1]]
    rows = execute(_tasks(cfg, cfg.density, perms=perms), threads)
    pairs = _paired(rows, perms)
    diffs = [p["diff"] for p in pairs if p["diff"] is not None]
    summary = {
        "experiment": "ordering",
        "density": _density_label(cfg.density),
        "orderings": [ordering_label(p) for p in perms],
        "pairs": len(pairs),
        "valid_pairs": len(diffs),
        "first_wins_fraction": (sum(d > 0 for d in diffs) / len(diffs)) if diffs else float("nan"),
        "median_diff": float(np.median(diffs)) if diffs else float("nan"),
        "sign_test_p": sign_test(diffs),
        "failure_fraction": {str(k): v for k, v in _check_failures(rows, lambda r: r.n).items()},
    }
    buf = io.StringIO()
    if pairs:
        w = csv.DictWriter(buf, fieldnames=list(pairs[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: _fmt(v) for k, v in p.items()} for p in pairs)
    _write(cfg, "ordering", rows, summary, {"ordering_pairs.csv": buf.getvalue()})
    _raise_on_failures(rows, summary)
    return OrderingOutput(rows, pairs, summary)


@dataclass
class SineOutput:
    rows: list
    medians: dict
    summary: dict


def run_sine_frequency(cfg: ExperimentConfig, threads: int = 1) -> SineOutput:
    tasks = []
    labels = []
    for gi, freqs in enumerate(cfg.frequencies):
        den = dict(cfg.density, kind="sine", freqs=list(freqs))
        labels.append(_density_label(den))
        tasks += _tasks(cfg, den, group=gi)
    rows = execute(tasks, threads)
    medians = {}
    for r in rows:
        if r.converged:
            medians.setdefault((r.density, r.ordering, r.n), []).append(r.test_nll)
    medians = {k: float(np.median(v)) for k, v in medians.items()}
    summary = {
        "experiment": "sine_frequency",
        "densities": labels,
        "median_test_nll": [
            {"density": k[0], "ordering": k[1], "n": k[2], "median": v} for k, v in sorted(medians.items())
        ],
        "failure_fraction": {
            str(k): v for k, v in _check_failures(rows, lambda r: f"{r.density}/{r.n}").items()
        },
    }
    _write(cfg, "sine", rows, summary)
    _raise_on_failures(rows, summary)
    return SineOutput(rows, medians, summary)


def run_experiment(cfg: ExperimentConfig, threads: int = 1):
    runners = {"rates": run_rates, "ordering": run_ordering, "sine_frequency": run_sine_frequency}
    if cfg.experiment not in runners:
        raise ConfigError(f"experiment {cfg.experiment!r} is run through its own CLI command")
    return runners[cfg.experiment](cfg, threads)


def default_threads() -> int:
    return max(1, min(8, os.cpu_count() or 1))
