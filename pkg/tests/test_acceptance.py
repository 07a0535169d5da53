"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Runs the full-size Monte Carlo experiments (about half an hour on one core).
Expensive estimates are memoized so the symmetry criterion reuses them.
"""

import functools
import math
import time

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from fkhess import bounds as bd
from fkhess import estimators as est
from fkhess import geometry as geo
from fkhess import oracles as orc
from fkhess import paths as pth
from fkhess import transport as tr
from fkhess.config import parse_config, write_config
from fkhess.reduce import map_paths, mean_estimate

E3 = np.eye(3)


# ---------------------------------------------------------------------------
# shared experiments
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def euclidean_kernel_hessian():
    M = geo.euclidean(3)
    out = est.hess_kernel(M, None, None, np.array([1.0, 0, 0]), pth.BridgeSpec(1.0, 400), 200_000, 101, frame0=E3)
    return out["normalized"]


@functools.lru_cache(maxsize=None)
def hyperbolic_kernel_hessian():
    M = geo.hyperbolic(3)
    x0 = geo.point_at(M, 1.0)
    est_h = est.hess_kernel(M, None, None, x0, pth.BridgeSpec(0.5, 400), 500_000, 105)["normalized"]
    p = float(orc.exact_kernel("hyperbolic", 3, 0.5, 1.0))
    field = lambda pts: orc.exact_kernel("hyperbolic", 3, 0.5, geo.pole_distance(M, pts))  # noqa: E731
    fd = orc.fd_hessian(field, M, x0)
    return est_h, fd.value / p, fd.budget / p


@functools.lru_cache(maxsize=None)
def feynman_kac_hessian():
    M = geo.euclidean(3)
    V = geo.ClippedDistancePotential(10.0)
    f = est.ConstantFunction()
    x0 = np.array([0.3, 0.2, 0.0])
    h = est.hess_feynman_kac(M, None, V, f, x0, 0.5, 256, 200_000, 107, frame0=E3)
    ref = orc.nested_fk_reference(M, None, V, f, 0.5, x0, 256, 200_000, 207, frame0=E3)
    return h, ref


def _max_asymmetry_ratio(e) -> float:
    """max |H - H^T| / (3 stderr) with the larger stderr of each mirrored pair."""
    se = np.maximum(e.stderr, e.stderr.T)
    asym = np.abs(e.value - e.value.T)
    off = ~np.eye(e.value.shape[0], dtype=bool)
    return float(np.max(asym[off] / (3 * se[off])))


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_01_euclidean_kernel_hessian(report):
    e = euclidean_kernel_hessian()
    target = np.diag([0.0, -1.0, -1.0])
    z = float(np.max(np.abs(e.value - target) / e.stderr))
    se = float(e.stderr.max())
    ok = z <= 3 and se <= 0.02
    report(1, "euclidean kernel Hessian", ok, f"max |z| = {z:.2f} (gate 3), max stderr = {se:.4f} (gate 0.02)")
    assert ok


def test_criterion_02_hyperbolic_elementary_kernel(report):
    M = geo.hyperbolic(3)
    e = est.kernel_elementary(M, None, None, geo.point_at(M, 1.0), pth.BridgeSpec(1.0, 200), 4096, 102)
    exact = float(orc.exact_kernel("hyperbolic", 3, 1.0, 1.0))
    rel = abs(float(e.value) - exact) / exact
    ok = rel <= 0.005
    report(2, "hyperbolic elementary kernel", ok, f"relative deviation {rel:.2e} (gate 5e-3)")
    assert ok


def _bridge_square_distance(idx, M, x0, spec, seed, times):
    path = pth.sample_sc_bridge(M, spec, x0, seed, idx)
    return np.stack([path.r[path.step_index(s)] ** 2 for s in times], axis=1)


def test_criterion_03_bessel_bridge_marginals(report):
    times = np.array([0.25, 0.5, 0.75])
    expected = (1 - times) ** 2 * 1.0 + 3 * times * (1 - times)
    worst, ok = 0.0, True
    for kind in ("euclidean", "hyperbolic"):
        M = getattr(geo, kind)(3)
        # the Euler bias is first order in the step, so a fine grid keeps it well below 3 stderr
        samples = map_paths(_bridge_square_distance, 100_000, M, geo.point_at(M, 1.0), pth.BridgeSpec(1.0, 2000),
                            103, tuple(times))
        e = mean_estimate(samples, 103)
        z = float(np.max(np.abs(e.value - expected) / e.stderr))
        worst = max(worst, z)
        ok &= z <= 3
    report(3, "Bessel-bridge marginals", ok, f"max |z| over both manifolds and three times = {worst:.2f} (gate 3)")
    assert ok


def _bridge_side(idx, M, weight, x0, spec, seed):
    path = pth.sample_sc_bridge(M, spec, x0, seed, idx, weight=weight)
    t = 0.5 * spec.T
    return pth.girsanov_weight(M, weight, path, t) * np.exp(-path.r[path.step_index(t)] ** 2)


def _h_bm_side(idx, M, weight, x0, t, steps, seed):
    path = pth.sample_h_bm(M, weight, x0, t, steps, seed, idx)
    return np.exp(-path.r[-1] ** 2)


def test_criterion_04_girsanov_identity(report):
    weight = geo.QuadraticWeight(0.1)
    parts, ok = [], True
    for kind in ("euclidean", "hyperbolic"):
        M = getattr(geo, kind)(3)
        x0 = geo.point_at(M, 1.0)
        bridge = mean_estimate(map_paths(_bridge_side, 100_000, M, weight, x0, pth.BridgeSpec(1.0, 800), 104), 104)
        direct = mean_estimate(map_paths(_h_bm_side, 100_000, M, weight, x0, 0.5, 400, 204), 204)
        gap = abs(float(bridge.value) - float(direct.value))
        se = math.hypot(float(bridge.stderr), float(direct.stderr))
        ok &= gap <= 3 * se
        parts.append(f"{kind} gap {gap:.2e} vs 3 se {3 * se:.2e}")
    report(4, "Girsanov identity", ok, "; ".join(parts))
    assert ok


def test_criterion_05_hyperbolic_kernel_hessian_and_theta_convention(report):
    e, ref, budget = hyperbolic_kernel_hessian()
    tol = np.maximum(3 * e.stderr, 0.02 * np.abs(ref) + budget)
    worst = float(np.max(np.abs(e.value - ref) / tol))
    ok_plain = worst <= 1

    # weighted rerun: every coefficient in front of Theta^h on one set of paths
    M = geo.hyperbolic(3)
    weight = geo.QuadraticWeight(0.2)
    spec = pth.BridgeSpec(0.5, 200)
    radial = orc.kernel_hessian_radial_reference(M, weight, None, 1.0, spec, 8192, 305)
    scan = est.hess_kernel_theta_scan(M, weight, geo.point_at(M, 1.0), spec, 100_000, 205)
    zmax = {}
    for c, s in scan.items():
        zmax[c] = float(np.max(np.abs(s.value - radial.value) / np.hypot(s.stderr, radial.stderr)))
    chosen = min(zmax, key=zmax.get)
    default = scan[tr.DEFAULT_THETA_COEFFICIENT]
    se = np.hypot(default.stderr, radial.stderr)
    wtol = np.maximum(3 * se, 0.02 * np.abs(radial.value) + radial.budget)
    wworst = float(np.max(np.abs(default.value - radial.value) / wtol))
    ok_weighted = chosen == tr.DEFAULT_THETA_COEFFICIENT and wworst <= 1
    ok = ok_plain and ok_weighted
    scan_text = ", ".join(f"{c:+g}: {z:.1f}" for c, z in sorted(zmax.items()))
    report(5, "hyperbolic kernel Hessian vs finite differences", ok,
           f"worst error/tolerance {worst:.2f}; weighted rerun error/tolerance {wworst:.2f}, "
           f"max |z| by Theta^h coefficient {{{scan_text}}}, best {chosen:+g}")
    assert ok


def _transport_excess(idx, M, weight, x0, t, steps, seed):
    path = pth.sample_h_bm(M, weight, x0, t, steps, seed, idx)
    trace = tr.evolve_W(M, weight, path, keep=True)
    op = np.linalg.norm(trace.A, ord=2, axis=(-2, -1)) ** 2
    return np.max(op / np.exp(trace.log_bound), axis=0)


def test_criterion_06_damped_transport_bound(report):
    M = geo.hyperbolic(3)
    excess = map_paths(_transport_excess, 10_000, M, geo.QuadraticWeight(0.2), geo.point_at(M, 1.0), 1.0, 200, 106)
    fraction = float(np.mean(excess <= 1 + 1e-6))
    ok = fraction == 1.0
    report(6, "damped transport bound", ok, f"{fraction:.2%} of 10000 paths within the bound, "
           f"max ratio {float(excess.max()):.6f}")
    assert ok


def test_criterion_07_second_order_feynman_kac(report):
    h, ref = feynman_kac_hessian()
    z = float(np.max(np.abs(h.value - ref.value) / np.hypot(h.stderr, ref.stderr)))
    ok = z <= 3
    report(7, "second-order Feynman-Kac vs nested reference", ok,
           f"max |z| = {z:.2f} (gate 3), reference FD budget {float(ref.budget.max()):.1e}")
    assert ok


def test_criterion_08_hessian_symmetry(report):
    ratios = {
        "criterion 1": _max_asymmetry_ratio(euclidean_kernel_hessian()),
        "criterion 5": _max_asymmetry_ratio(hyperbolic_kernel_hessian()[0]),
        "criterion 7": _max_asymmetry_ratio(feynman_kac_hessian()[0]),
    }
    ok = all(r <= 1 for r in ratios.values())
    report(8, "Hessian symmetry", ok, ", ".join(f"{k} asymmetry/(3 se) {v:.2f}" for k, v in ratios.items()))
    assert ok


def test_criterion_09_bound_suite(report):
    M = geo.hyperbolic(3)
    mom = bd.bridge_moments(M, None, 1.0, 1.0, 200, 16384, 109)
    rows = [
        bd.check_w2_martingale_moment(M, None, 1.0, 1.0, 1.5, 200, 16384, 109, moments=mom),
        bd.check_product_term_moment(M, None, 1.0, 1.0, 1.5, 1.2, 200, 16384, 109, moments=mom),
    ]
    for t in (0.25, 0.5):
        for d in (0.0, 1.0):
            rows.append(bd.check_hessian_log_estimate(M, t, d, 200, 20480, 209))
    ok = all(r.ratio <= 1 for r in rows)
    report(9, "bound suite on hyperbolic space", ok, ", ".join(f"{r.name} ratio {r.ratio:.3f}" for r in rows))
    assert ok


# ---------------------------------------------------------------------------
# property floor (no Monte Carlo beyond a tiny determinism run)
# ---------------------------------------------------------------------------


def _property_floor() -> list[str]:
    failures = []
    rng = np.random.default_rng(110)
    for M in (geo.euclidean(3), geo.hyperbolic(3), geo.sphere(3), geo.hyperbolic(4)):
        n = M.n
        E = np.eye(n)
        for _ in range(20):
            r = np.asarray(rng.uniform(0.05, 1.5))
            nv = rng.standard_normal(n)
            nv /= np.linalg.norm(nv)
            v1, v2 = rng.standard_normal((2, n))
            if np.max(np.abs(geo.theta_apply(M, r, nv, v2, v1))) > 1e-8:
                failures.append(f"theta nonzero on {M.kind}")
    for M in (geo.hyperbolic(3), geo.warped(3, geo.CubicProfile(0.1)), geo.warped(4, geo.CubicProfile(0.3))):
        n = M.n
        E = np.eye(n)
        for _ in range(20):
            r = np.asarray(rng.uniform(0.0, 2.0))
            nv = rng.standard_normal(n)
            nv /= np.linalg.norm(nv)
            X, Y, Z = rng.standard_normal((3, n))
            R = lambda a, b, c: geo.curvature_apply(M, r, nv, a, b, c)  # noqa: E731
            cyc = R(X, Y, Z) + R(Y, Z, X) + R(Z, X, Y)
            if np.max(np.abs(cyc)) > 1e-8 * (1 + np.linalg.norm(X) * np.linalg.norm(Y) * np.linalg.norm(Z)):
                failures.append(f"first Bianchi identity on {M.kind}")
            trace = sum(np.dot(R(E[i], Y, Z), E[i]) for i in range(n))
            if abs(trace - Y @ geo.ricci_matrix(M, r, nv) @ Z) > 1e-8 * (1 + abs(trace)):
                failures.append(f"Ricci trace on {M.kind}")
    for T in (0.1, 1.0, 7.0):
        if bd.exponential_growth_constant(T, 0.0) != 1.0:
            failures.append("growth constant at zero curvature")
    for c in (-1.3, 0.0, 2.0):
        rows = bd.check_stroock(np.ones(8), np.full(8, c))
        if not all(r.passed and math.isclose(r.lhs, c, abs_tol=1e-12) for r in rows):
            failures.append(f"Stroock constant case {c}")
    rows = bd.check_stroock(np.exp(rng.standard_normal(64)), np.zeros(64))
    if not all(r.passed for r in rows):
        failures.append("Stroock with zero exponent")
    text = "[task]\nname = hess-kernel\n[manifold]\nkind = hyperbolic\n[run]\nT = 0.7\nsteps = 40\nseed = 3\n"
    cfg = parse_config(text)
    if parse_config(write_config(cfg)).echo() != cfg.echo():
        failures.append("config round trip")
    M = geo.hyperbolic(3)
    runs = [
        est.hess_kernel(M, None, None, geo.point_at(M, 0.5), pth.BridgeSpec(0.5, 16), 512, 3, workers=w)["normalized"]
        for w in (1, 2, 1)
    ]
    if not all(np.array_equal(r.value, runs[0].value) and np.array_equal(r.stderr, runs[0].stderr) for r in runs):
        failures.append("determinism across reruns and worker counts")
    return failures


def test_criterion_10_property_floor(report):
    start = time.perf_counter()
    failures = _property_floor()
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 30
    report(10, "property floor", ok, f"{len(failures)} failures in {elapsed:.1f} s (gate 30 s)"
           + (f": {'; '.join(sorted(set(failures)))}" if failures else ""))
    assert ok


@settings(max_examples=50, deadline=None)
@given(T=st.floats(1e-3, 50.0))
def test_growth_constant_is_one_without_curvature(T):
    assert bd.exponential_growth_constant(T, 0.0) == 1.0
