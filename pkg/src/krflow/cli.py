"""Command-line interface: ``krflow <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 a checked threshold failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import SeedSpec
from .densities import Gaussian, SupportBox, density_from_config
from .harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentFailure,
    build_model,
    load_config,
    run_ordering,
    run_rates,
    run_sine_frequency,
)
from .kr_exact import InversionError, invert_triangular_map, kr_to_standard_gaussian, numerical_kr
from .objective import LossConfig, OptimizerOptions, empirical_loss, loss_gradient, optimize
from .param_maps import map_from_json

EXIT_OK, EXIT_CONFIG, EXIT_THRESHOLD = 0, 2, 3


def _global_options(p: argparse.ArgumentParser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON configuration file")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (unsigned 64-bit)")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("--threads", type=int, default=d(1), help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="krflow", description="Triangular transport map estimation")
    _global_options(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help):
        s = sub.add_parser(name, help=help)
        _global_options(s, suppress=True)
        return s

    s = cmd("sample", "draw samples from the configured density")
    s.add_argument("--n", type=int, default=1000)
    s = cmd("kr-exact", "evaluate the exact map to the standard Gaussian on a grid")
    s.add_argument("--grid", type=int, default=20)
    s.add_argument("--numerical", action="store_true", help="quadrature/bisection construction")
    s = cmd("train", "fit a monotone triangular map and save it")
    s.add_argument("--n", type=int, default=None)
    s = cmd("invert", "round-trip a saved map through its inverse")
    s.add_argument("--map", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-8)
    cmd("rates", "convergence-rate experiment")
    cmd("ordering", "paired coordinate-ordering experiment")
    cmd("sine", "sine-frequency sweep")
    s = cmd("gradcheck", "compare analytic and finite-difference gradients")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--tol", type=float, default=1e-4)
    cmd("selftest", "run the built-in quick checks")
    return p


def _doc(args) -> dict:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    if not Path(args.config).exists():
        raise ConfigError(f"config file {args.config} not found")
    doc = load_config(args.config)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _experiment(args, name) -> ExperimentConfig:
    doc = _doc(args)
    doc.setdefault("experiment", name)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["output_path"] = args.out
    return ExperimentConfig.from_dict(doc)


def _density(doc):
    try:
        return density_from_config(doc.get("density", doc))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad density config: {exc}") from exc


def _outdir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, doc) -> int:
    return int(args.seed if args.seed is not None else doc.get("seed", 0))


def _save_matrix(path: Path, x):
    np.savetxt(path, x, delimiter=",", fmt="%.17g")


def cmd_sample(args):
    doc = _doc(args)
    f = _density(doc)
    x = f.sample(args.n, SeedSpec(_seed(args, doc)))
    path = _outdir(args) / "samples.csv"
    _save_matrix(path, x)
    print(f"wrote {len(x)} samples to {path}")
    return EXIT_OK


def cmd_kr_exact(args):
    doc = _doc(args)
    f = _density(doc)
    S = numerical_kr(f, Gaussian.standard(f.dim)) if args.numerical else kr_to_standard_gaussian(f)
    grid = f.support.grid(args.grid)
    y = S.evaluate(grid)
    path = _outdir(args) / "kr_exact.csv"
    _save_matrix(path, np.hstack([grid, y]))
    print(f"wrote {len(grid)} grid evaluations to {path}")
    return EXIT_OK


def cmd_train(args):
    doc = _doc(args)
    f = _density(doc)
    n = args.n or int(doc.get("ns", [doc.get("n", 1000)])[0])
    x = f.sample(n, SeedSpec(_seed(args, doc)))
    model = build_model(f.support, doc.get("map", {}), doc.get("flow"), doc.get("init", "identity"), x)
    opts = OptimizerOptions(**doc.get("optimizer", {}))
    res = optimize(model, x, LossConfig(Gaussian.standard(f.dim)), opts)
    fitted = model.with_theta(res.theta_hat)
    out = _outdir(args)
    (out / "map.json").write_text(json.dumps(fitted.to_json()) + "\n")
    (out / "train_result.json").write_text(json.dumps(res.to_json(), indent=2) + "\n")
    _save_matrix(out / "train.csv", x)
    print(f"final loss {res.final_loss:.10g} after {res.iterations} iterations (converged={res.converged})")
    print(f"saved map to {out / 'map.json'}")
    return EXIT_OK


def cmd_invert(args):
    doc = json.loads(Path(args.map).read_text())
    S = map_from_json(doc)
    box = S.support_in
    if args.config:
        x = _density(_doc(args)).sample(args.n, SeedSpec(_seed(args, {})))
    else:
        rng = SeedSpec(args.seed or 0).rng()
        x = box.lo + box.width * rng.uniform(0.05, 0.95, size=(args.n, box.dim))
    y = S.evaluate(x)
    try:
        back = invert_triangular_map(S, y, tol=args.tol)
    except InversionError as exc:
        print(f"inversion failed: {exc}")
        return EXIT_THRESHOLD
    err = float(np.max(np.abs(back - x)))
    report = {"points": len(x), "max_roundtrip_error": err, "tol": args.tol}
    (_outdir(args) / "invert_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"max round-trip error {err:.3e} over {len(x)} points")
    return EXIT_OK if err <= args.tol else EXIT_THRESHOLD


def _run(fn, name):
    def handler(args):
        cfg = _experiment(args, name)
        try:
            out = fn(cfg, threads=args.threads)
        except ExperimentFailure as exc:
            print(f"experiment failed: {exc}")
            return EXIT_THRESHOLD
        print(json.dumps(out.summary, indent=2, sort_keys=True))
        return EXIT_OK

    return handler


def gradcheck(spec, data, cfg: LossConfig, h: float = 1e-6) -> float:
    """Max |analytic - central difference| relative to the gradient's scale."""
    grad = loss_gradient(spec, data, cfg)
    fd = np.empty_like(grad)
    for i in range(len(grad)):
        e = np.zeros_like(grad)
        e[i] = h
        fd[i] = (
            empirical_loss(spec.with_theta(spec.theta + e), data, cfg)
            - empirical_loss(spec.with_theta(spec.theta - e), data, cfg)
        ) / (2 * h)
    return float(np.max(np.abs(grad - fd)) / max(float(np.max(np.abs(fd))), 1e-12))


def cmd_gradcheck(args):
    doc = _doc(args)
    f = _density(doc)
    seed = SeedSpec(_seed(args, doc))
    x = f.sample(args.n, seed)
    model = build_model(f.support, doc.get("map", {}), doc.get("flow"), "identity", x)
    rng = seed.child(1).rng()
    model = model.with_theta(model.theta + 0.05 * rng.standard_normal(len(model.theta)))
    err = gradcheck(model, x, LossConfig(Gaussian.standard(f.dim)))
    print(f"max relative gradient error {err:.3e}")
    return EXIT_OK if err <= args.tol else EXIT_THRESHOLD


def selftest_checks():
    """Quick checks with exactly known answers; yields (name, passed)."""
    from .core import invert_upper_triangular, rate_exponents
    from .metrics import fit_loglog_slope, sup_grid_error
    from .kr_exact import OffsetMap
    from .param_maps import MonotoneMap

    A = np.array([[2.0, 1.0], [0.0, 4.0]])
    yield "triangular inverse", np.allclose(invert_upper_triangular(A) @ A, np.eye(2), atol=1e-15)
    yield "rate exponent s=(1,1)", rate_exponents([1, 1])[0].sigma_k == 1
    yield "loglog slope", abs(fit_loglog_slope([10, 100, 1000], [[1.0], [0.1], [0.01]]).slope + 1) < 1e-12
    g = Gaussian.standard(2)
    ident = MonotoneMap.identity(g.support)
    x = g.sample(100, SeedSpec(0))
    yield "identity zero KL", abs(empirical_loss(ident, x, LossConfig(g, g, include_f_term=True))) < 1e-12
    S = kr_to_standard_gaussian(Gaussian.bivariate(rho=0.7))
    yield "offset sup error", abs(sup_grid_error(S, OffsetMap(S, [0.1, 0.0]), 10) - 0.1) < 1e-12
    res = optimize(ident, x, LossConfig(g), OptimizerOptions(max_iters=0))
    yield "no-op optimizer", (not res.converged) and res.iterations == 0
    box = SupportBox([0.0, 0.0], [1.0, 1.0])
    yield "box contains", bool(box.contains([[0.5, 0.5]])[0]) and not bool(box.contains([[1.5, 0.5]])[0])


def cmd_selftest(args):
    ok = True
    for name, passed in selftest_checks():
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        ok &= bool(passed)
    return EXIT_OK if ok else EXIT_THRESHOLD


COMMANDS = {
    "sample": cmd_sample,
    "kr-exact": cmd_kr_exact,
    "train": cmd_train,
    "invert": cmd_invert,
    "rates": _run(run_rates, "rates"),
    "ordering": _run(run_ordering, "ordering"),
    "sine": _run(run_sine_frequency, "sine_frequency"),
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
