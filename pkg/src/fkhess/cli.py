"""Command line runner: ``fkhess run <config> [--set section.key=value]... [--out dir]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure during the
run, 4 a failed check in the validate task.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from fkhess import __version__
from fkhess import bounds as bd
from fkhess import estimators as est
from fkhess import geometry as geo
from fkhess import oracles as orc
from fkhess import paths as pth
from fkhess import transport as tr
from fkhess.config import ConfigError, ExperimentConfig, load_config
from fkhess.reduce import McEstimate, WORKERS_ENV

SCHEMA_VERSION = "1"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATE = 0, 2, 3, 4
CSV_HEADER = ["i", "j", "value", "stderr"]
NUMERIC_ERRORS = (FloatingPointError, OverflowError, ZeroDivisionError, np.linalg.LinAlgError, geo.GeometryError)


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=10,
        )
        described = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"{__version__}+{described}" if described else __version__


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


class TaskResult:
    def __init__(self):
        self.estimates: dict[str, McEstimate] = {}
        self.constants: dict = {}
        self.checks: list[bd.CheckRow] = []


def _exact_kernel_kind(M) -> str | None:
    if M.kind == "euclidean" or (M.kind == "hyperbolic" and M.n == 3):
        return M.kind
    return None


def run_task(cfg: ExperimentConfig) -> TaskResult:
    M = cfg.build_manifold()
    weight = cfg.build_weight()
    V = cfg.build_potential()
    x0 = cfg.start_point(M)
    common = {"workers": cfg.workers}
    res = TaskResult()
    spec = pth.BridgeSpec(cfg.T, cfg.steps)
    kind = _exact_kernel_kind(M)
    plain = weight.is_zero and V is None
    if cfg.task == "hess-semigroup":
        f = cfg.build_function()
        if V is None:
            res.estimates["hessian"] = est.hess_semigroup(
                M, weight, f, x0, cfg.T, cfg.steps, cfg.n_paths, cfg.seed,
                theta_coefficient=cfg.theta_coefficient, **common,
            )
        else:
            res.estimates["hessian"] = est.hess_feynman_kac(
                M, weight, V, f, x0, cfg.T, cfg.steps, cfg.n_paths, cfg.seed, cfg.r_nodes,
                theta_coefficient=cfg.theta_coefficient, **common,
            )
    elif cfg.task == "hess-fk":
        res.estimates["hessian"] = est.hess_feynman_kac(
            M, weight, V, cfg.build_function(), x0, cfg.T, cfg.steps, cfg.n_paths, cfg.seed, cfg.r_nodes,
            theta_coefficient=cfg.theta_coefficient, **common,
        )
    elif cfg.task == "kernel":
        res.estimates["kernel"] = est.kernel_elementary(M, weight, V, x0, spec, cfg.n_paths, cfg.seed, **common)
        if kind and plain:
            res.constants["exact_kernel"] = orc.exact_kernel(kind, M.n, cfg.T, cfg.distance)
    elif cfg.task == "grad-kernel":
        res.estimates.update(est.grad_kernel(M, weight, x0, spec, cfg.n_paths, cfg.seed, **common))
    elif cfg.task in ("hess-kernel", "log-hess"):
        out = est.hess_kernel(
            M, weight, V, x0, spec, cfg.n_paths, cfg.seed, cfg.r_nodes,
            theta_coefficient=cfg.theta_coefficient, **common,
        )
        if cfg.task == "log-hess":
            res.estimates["log_hessian"] = out["log_hessian"]
            res.estimates["grad_log"] = out["grad_log"]
        else:
            res.estimates.update(out)
        if kind and plain:
            ratio = orc.exact_kernel_hessian_ratio(kind, M.n, cfg.T, cfg.distance)
            res.constants["exact_hessian_ratio"] = ratio.tolist()
    elif cfg.task == "bounds-suite":
        _bounds_suite(cfg, M, weight, res)
    elif cfg.task == "validate":
        _validate(cfg, M, weight, V, x0, res)
    return res


def _bounds_suite(cfg, M, weight, res):
    cs = bd.constants(M, weight, cfg.distance, cfg.T, cfg.p, cfg.alpha, cfg.delta0, steps=cfg.steps,
                      n_paths=cfg.n_paths, seed=cfg.seed, workers=cfg.workers)
    res.constants["constant_set"] = cs.to_dict()
    mom = bd.bridge_moments(M, weight, cfg.distance, cfg.T, cfg.steps, cfg.n_paths, cfg.seed, workers=cfg.workers)
    table = bd.load_calibration()
    key = bd._key(cfg.p, M.n)
    if key in table["w2_martingale_moment"]["values"]:
        res.checks.append(bd.check_w2_martingale_moment(M, weight, cfg.distance, cfg.T, cfg.p, cfg.steps, cfg.n_paths, cfg.seed,
                                           moments=mom))
        res.checks.append(bd.check_product_term_moment(M, weight, cfg.distance, cfg.T, cfg.p, cfg.alpha, cfg.steps, cfg.n_paths,
                                           cfg.seed, moments=mom))
    else:
        res.constants["skipped"] = f"no calibrated moment constants for {key}"
    if M.kind == "hyperbolic" and M.n == 3 and weight.is_zero:
        res.checks.append(bd.check_hessian_log_estimate(M, cfg.T / 2, cfg.distance, cfg.steps, cfg.n_paths,
                                                        cfg.seed, cfg.delta0, workers=cfg.workers))
    z = np.random.default_rng(cfg.seed).standard_normal(cfg.n_paths)
    res.checks.extend(bd.check_stroock(np.exp(z), z, "stroock_gaussian"))
    res.checks.append(bd.check_exponential_integrability(M, weight, cfg.distance, cfg.T, cfg.steps,
                                                         min(cfg.n_paths, 4096), cfg.seed))


def _row(name, lhs, rhs, ok, stderr=0.0, **detail):
    ratio = float(bd._ratio(abs(lhs), abs(rhs)))
    return bd.CheckRow(name, float(lhs), float(rhs), ratio, float(stderr), bool(ok), detail)


def _validate(cfg, M, weight, V, x0, res):
    """Fast consistency checks on the configured model; any failure gives exit code 4."""
    checks = res.checks
    checks.append(_row("growth_constant_flat", bd.exponential_growth_constant(cfg.T, 0.0), 1.0,
                       bd.exponential_growth_constant(cfg.T, 0.0) == 1.0))
    checks.extend(bd.check_stroock(np.ones(16), np.full(16, 0.5), "stroock_constant"))
    if M.is_space_form:
        # frame coordinates with the radial direction along e_1 at distance 0.7
        E = np.eye(M.n)
        r = np.asarray(0.7)
        th = max(float(np.max(np.abs(geo.theta_apply(M, r, E[0], E[i], E[j]))))
                 for i in range(M.n) for j in range(M.n))
        checks.append(_row("theta_vanishes", th, 1e-8, th <= 1e-8))
    if M.has_pole:
        spec = pth.BridgeSpec(cfg.T, cfg.steps)
        kind = _exact_kernel_kind(M)
        plain = weight.is_zero and V is None
        if kind and plain:
            el = est.kernel_elementary(M, None, None, x0, spec, cfg.n_paths, cfg.seed, workers=cfg.workers)
            exact = orc.exact_kernel(kind, M.n, cfg.T, cfg.distance)
            dev = abs(float(el.value) - exact)
            checks.append(_row("kernel_elementary", float(el.value), exact, dev <= 0.005 * exact, float(el.stderr)))
            out = est.hess_kernel(M, None, None, x0, spec, cfg.n_paths, cfg.seed, workers=cfg.workers)["normalized"]
            ref = orc.exact_kernel_hessian_ratio(kind, M.n, cfg.T, cfg.distance)
            # the curved bridge carries a first-order step bias; 2% covers 200 steps
            tol = 4 * out.stderr + (0.0 if kind == "euclidean" else 0.02 * np.abs(ref).max())
            worst = float(np.max(np.abs(out.value - ref) / tol))
            checks.append(_row("kernel_hessian", worst, 1.0, worst <= 1.0, ref_max=float(np.abs(ref).max())))
            # sd(X_ij - X_ji) <= sd(X_ij) + sd(X_ji) whatever the correlation
            worst = float(np.max(np.abs(out.value - out.value.T) / (4 * (out.stderr + out.stderr.T) + 1e-300)))
            checks.append(_row("kernel_hessian_symmetry", worst, 1.0, worst <= 1.0))
    walk = pth.sample_h_bm(M, weight if M.has_pole else None, x0, cfg.T, cfg.steps, cfg.seed,
                           np.arange(min(cfg.n_paths, 2048)))
    trace = tr.evolve_W(M, weight if M.has_pole else None, walk, keep=True)
    op = np.linalg.norm(trace.A, ord=2, axis=(-2, -1)) ** 2
    excess = float(np.max(op / np.exp(trace.log_bound)))
    checks.append(_row("damped_transport_bound", excess, 1.0 + 1e-6, excess <= 1.0 + 1e-6))


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _matrix_rows(value, stderr):
    v = np.atleast_1d(np.asarray(value, dtype=float))
    s = np.atleast_1d(np.asarray(stderr, dtype=float))
    if v.ndim == 1:
        v, s = v[:, None], s[:, None]
    for i in range(v.shape[0]):
        for j in range(v.shape[1]):
            yield [i, j, repr(float(v[i, j])), repr(float(s[i, j]))]


def write_matrix_csv(filename, estimate: McEstimate) -> None:
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(_matrix_rows(estimate.value, estimate.stderr))


def build_document(cfg: ExperimentConfig, res: TaskResult) -> dict:
    return bd._jsonable({
        "schema": SCHEMA_VERSION,
        "version": version_string(),
        "task": cfg.task,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "estimates": {k: v.to_dict() for k, v in sorted(res.estimates.items())},
        "constants": res.constants,
        "checks": [row.to_dict() for row in res.checks],
    })


def emit(cfg: ExperimentConfig, res: TaskResult, out_dir: Path, wall_time: float) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = build_document(cfg, res)
    (out_dir / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    # wall time varies between runs, so it lives apart from the reproducible results
    timing = {"schema": SCHEMA_VERSION, "task": cfg.task, "wall_time_seconds": wall_time}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    for name, estimate in res.estimates.items():
        write_matrix_csv(out_dir / f"{name}.csv", estimate)
    if res.checks:
        report = "validate.csv" if cfg.task == "validate" else "bounds.csv"
        bd.write_report(res.checks, str(out_dir / report))
    return doc


def dump_paths(cfg: ExperimentConfig, out_dir: Path, count: int) -> None:
    M = cfg.build_manifold()
    x0 = cfg.start_point(M)
    idx = np.arange(count)
    if cfg.task in ("kernel", "grad-kernel", "hess-kernel", "log-hess", "bounds-suite"):
        path = pth.sample_sc_bridge(M, pth.BridgeSpec(cfg.T, cfg.steps), x0, cfg.seed, idx, weight=cfg.build_weight())
    else:
        weight = cfg.build_weight() if M.has_pole else None
        path = pth.sample_h_bm(M, weight, x0, cfg.T, cfg.steps, cfg.seed, idx)
    out_dir.mkdir(parents=True, exist_ok=True)
    pth.dump_paths(path, str(out_dir / "paths.csv"), count)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fkhess", description="Monte Carlo Hessian estimators on model manifolds")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", help="INI configuration file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                     help="override one config field (repeatable)")
    run.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
    run.add_argument("--dump-paths", type=int, default=0, metavar="N", help="also write the first N paths to paths.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.dump_paths < 0:
            raise ConfigError("--dump-paths must be non-negative")
        env = os.environ.get(WORKERS_ENV)
        if env is not None and "run.workers" not in " ".join(args.overrides):
            try:
                cfg.workers = max(1, int(env))
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV}={env!r}: expected an integer") from None
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out if args.out is not None else cfg.out_dir)
    start = time.perf_counter()
    try:
        res = run_task(cfg)
        if args.dump_paths:
            dump_paths(cfg, out_dir, args.dump_paths)
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure in task {cfg.task}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, bd.BoundsError) as exc:
        print(f"config error: task {cfg.task} cannot run with these settings: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.perf_counter() - start
    try:
        emit(cfg, res, out_dir, wall)
    except OSError as exc:
        print(f"cannot write results to {out_dir}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for row in res.checks:
        print(f"{row.name}: {'pass' if row.passed else 'fail'} (lhs={row.lhs:.6g}, rhs={row.rhs:.6g})")
    print(f"wrote {out_dir / 'results.json'}")
    if cfg.task == "validate" and not all(row.passed for row in res.checks):
        return EXIT_VALIDATE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
