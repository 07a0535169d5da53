import math

import numpy as np
import pytest

from fkhess import estimators as est
from fkhess import geometry as geo
from fkhess import oracles as orc
from fkhess import paths as pth


def within(e, target, k=3.0, slack=0.0):
    return np.all(np.abs(e.value - target) <= k * e.stderr + slack)


E3 = np.eye(3)


# ---------------------------------------------------------------------------
# quadrature over intermediate times
# ---------------------------------------------------------------------------


def test_sqrt_quadrature_rule():
    path = pth.sample_h_bm(geo.euclidean(2), None, np.zeros(2), 2.0, 256, 0, [0])
    nodes = est.quadrature_nodes(path, 256, 32)
    assert np.all(nodes.a_index % 2 == 0)
    assert np.allclose(nodes.a / 2, path.times[nodes.half_index])
    assert nodes.a_index[-1] == 256
    # the trapezoid in s = sqrt(a) integrates 2 s G(s^2) exactly when it is linear in s
    assert math.isclose(np.sum(nodes.weights), 2.0, rel_tol=1e-12)
    # and converges for smooth integrands
    assert math.isclose(np.sum(nodes.weights * nodes.a), 2.0, rel_tol=1e-2)


def test_quadrature_rejects_too_many_nodes():
    path = pth.sample_h_bm(geo.euclidean(2), None, np.zeros(2), 1.0, 20, 0, [0])
    with pytest.raises(ValueError, match="grid resolution"):
        est.quadrature_nodes(path, 20, 64)


def test_odd_steps_rejected():
    with pytest.raises(ValueError):
        est.hess_semigroup(geo.euclidean(2), None, est.ConstantFunction(), np.zeros(2), 1.0, 9, 10, 0)


# ---------------------------------------------------------------------------
# semigroup derivatives
# ---------------------------------------------------------------------------


def test_euclidean_gradient_of_linear_function():
    M = geo.euclidean(3)
    f = est.CoordinateFunction(0, 1, 2.0)
    g = est.grad_semigroup(M, None, f, np.array([0.3, 0, 0]), 1.0, 20, 20000, 1, frame0=E3)
    assert within(g, [2.0, 0, 0])
    g1 = est.grad_semigroup(M, None, est.ConstantFunction(), np.zeros(3), 1.0, 20, 4096, 1, frame0=E3)
    assert np.all(g1.value == 0) or within(g1, 0)


def test_hyperbolic_gradient_of_cosh():
    M = geo.hyperbolic(3)
    r0, t = 0.8, 0.5
    g = est.grad_semigroup(M, None, est.RadialFunction("cosh"), geo.point_at(M, r0), t, 40, 40000, 2)
    assert within(g, [math.exp(1.5 * t) * math.sinh(r0), 0, 0], slack=0.01)


def test_euclidean_hessian_of_square():
    M = geo.euclidean(3)
    h = est.hess_semigroup(M, None, est.CoordinateFunction(0, 2), np.array([0.5, 0.2, 0]), 0.5, 20, 40000, 3, frame0=E3)
    assert within(h, 2 * np.outer(E3[0], E3[0]))
    lin = est.hess_semigroup(M, None, est.CoordinateFunction(1), np.zeros(3), 0.5, 20, 20000, 3, frame0=E3)
    assert within(lin, 0)


def test_hyperbolic_hessian_of_cosh():
    M = geo.hyperbolic(3)
    r0, t = 0.8, 0.5
    h = est.hess_semigroup(M, None, est.RadialFunction("cosh"), geo.point_at(M, r0), t, 40, 40000, 4)
    assert within(h, math.exp(1.5 * t) * math.cosh(r0) * E3, slack=0.02)


def _cosh_grad(M, x, u):
    r, N = geo.radial_field(M, x)
    return np.sinh(r)[:, None] * geo.to_frame(M, u, N)


def _cosh_hess(M, x, u):
    r, _ = geo.radial_field(M, x)
    return np.cosh(r)[:, None, None] * np.eye(M.n)


def test_pathwise_and_integration_by_parts_hessians_agree_with_weight():
    M = geo.hyperbolic(3)
    w = geo.QuadraticWeight(0.2)
    x0 = geo.point_at(M, 0.6)
    f = est.RadialFunction("cosh")
    pw = est.hess_semigroup_pathwise(M, w, _cosh_grad, _cosh_hess, x0, 0.4, 40, 20000, 5)
    ibp = est.hess_semigroup(M, w, f, x0, 0.4, 40, 40000, 6)
    diff = np.abs(pw.value - ibp.value)
    assert np.all(diff <= 3 * np.hypot(pw.stderr, ibp.stderr) + 0.02)
    # the weight matters: compare against the driftless value
    plain = est.hess_semigroup_pathwise(M, None, _cosh_grad, _cosh_hess, x0, 0.4, 40, 20000, 5)
    assert np.max(np.abs(plain.value - pw.value)) > 10 * np.max(pw.stderr)


def test_pathwise_hessian_matches_finite_differences_with_weight():
    # independent check of the second-order transport, including the Theta^h source
    M = geo.hyperbolic(3)
    w = geo.QuadraticWeight(0.2)
    x0 = geo.point_at(M, 0.6)
    f = est.RadialFunction("cosh")
    pw = est.hess_semigroup_pathwise(M, w, _cosh_grad, _cosh_hess, x0, 0.4, 80, 20000, 7)
    ref = orc.nested_fk_reference(M, w, None, f, 0.4, x0, 80, 20000, 7, step=2e-2)
    assert np.all(np.abs(pw.value - ref.value) <= 3 * np.hypot(pw.stderr, ref.stderr) + ref.budget + 0.02)


def test_feynman_kac_constant_potential_scales_semigroup():
    M = geo.hyperbolic(3)
    x0 = geo.point_at(M, 0.5)
    f = est.RadialFunction("gauss")
    c = 0.7
    fk = est.hess_feynman_kac(M, None, geo.ConstantPotential(c), f, x0, 0.5, 40, 2048, 9, r_nodes=8)
    plain = est.hess_semigroup(M, None, f, x0, 0.5, 40, 2048, 9)
    assert np.allclose(fk.value, math.exp(-c * 0.5) * plain.value, rtol=1e-12, atol=1e-14)
    val = est.feynman_kac_value(M, None, geo.ConstantPotential(c), f, x0, 0.5, 40, 2048, 9)
    base = est.feynman_kac_value(M, None, None, f, x0, 0.5, 40, 2048, 9)
    assert np.allclose(val.value, math.exp(-c * 0.5) * base.value)


def test_feynman_kac_hessian_is_symmetric():
    M = geo.hyperbolic(3)
    V = geo.ClippedDistancePotential(5.0)
    h = est.hess_feynman_kac(M, None, V, est.RadialFunction("gauss"), geo.point_at(M, 0.5), 0.5, 80, 8192, 10, r_nodes=16)
    asym = np.abs(h.value - h.value.T)
    assert np.all(asym <= 3 * np.hypot(h.stderr, h.stderr.T) + 1e-12)


# ---------------------------------------------------------------------------
# kernel formulas
# ---------------------------------------------------------------------------


def test_euclidean_elementary_kernel_is_exact():
    M = geo.euclidean(3)
    e = est.kernel_elementary(M, None, None, np.array([1.0, 0, 0]), pth.BridgeSpec(1.0, 20), 512, 0)
    assert math.isclose(float(e.value), orc.exact_kernel("euclidean", 3, 1.0, 1.0), rel_tol=1e-12)
    assert float(e.stderr) == 0.0


def test_hyperbolic_elementary_kernel_is_exact():
    M = geo.hyperbolic(3)
    e = est.kernel_elementary(M, None, None, geo.point_at(M, 1.0), pth.BridgeSpec(1.0, 50), 512, 0)
    assert math.isclose(float(e.value), orc.exact_kernel("hyperbolic", 3, 1.0, 1.0), rel_tol=1e-10)
    assert float(e.stderr) < 1e-12 * float(e.value)


def test_constant_potential_scales_kernel():
    M = geo.hyperbolic(3)
    x0 = geo.point_at(M, 1.0)
    spec = pth.BridgeSpec(1.0, 50)
    a = est.kernel_elementary(M, None, geo.ConstantPotential(0.4), x0, spec, 256, 0)
    b = est.kernel_elementary(M, None, None, x0, spec, 256, 0)
    assert math.isclose(float(a.value), math.exp(-0.4) * float(b.value), rel_tol=1e-12)


def test_elementary_kernel_step_consistency_with_weight():
    M = geo.hyperbolic(3)
    w = geo.QuadraticWeight(0.2)
    x0 = geo.point_at(M, 1.0)
    coarse = est.kernel_elementary(M, w, None, x0, pth.BridgeSpec(0.5, 50), 8192, 1)
    fine = est.kernel_elementary(M, w, None, x0, pth.BridgeSpec(0.5, 100), 8192, 1)
    # first-order scheme: the change on halving the step bounds the remaining bias
    rel = abs(float(coarse.value - fine.value)) / float(fine.value)
    assert rel < 0.01


def test_elementary_kernel_rejects_sphere():
    with pytest.raises(geo.GeometryError):
        est.kernel_elementary(geo.sphere(2), None, None, geo.sphere(2).pole, pth.BridgeSpec(1.0, 10), 8, 0)


def test_euclidean_log_gradient():
    M = geo.euclidean(3)
    x0 = np.array([0.6, -0.8, 0.0])
    g = est.grad_kernel(M, None, x0, pth.BridgeSpec(1.0, 50), 20000, 2, frame0=E3)["grad_log"]
    # the bridge increments sum to the displacement, so the estimate has no variance
    assert within(g, -x0, slack=1e-12)


def test_log_gradient_vanishes_at_pole():
    M = geo.hyperbolic(3)
    g = est.grad_kernel(M, None, M.pole, pth.BridgeSpec(0.5, 50), 20000, 3)["grad_log"]
    assert within(g, 0)


def test_hyperbolic_log_gradient_matches_closed_form():
    M = geo.hyperbolic(3)
    x0 = geo.point_at(M, 1.0)
    # the first-order step bias is about 1e-3 at 800 steps
    g = est.grad_kernel(M, None, x0, pth.BridgeSpec(0.5, 800), 20000, 4)["grad_log"]
    field = lambda pts: orc.exact_log_kernel("hyperbolic", 3, 0.5, geo.pole_distance(M, pts))  # noqa: E731
    frame = geo.adapted_frame(M, x0)
    pts, _ = orc.probe_points(M, x0, frame, np.array([E3[0], -E3[0]]), 1e-4)
    fd = (field(pts[:1]) - field(pts[1:])) / 2e-4
    assert abs(g.value[0] - fd[0]) <= max(3 * g.stderr[0], 1e-3)
    assert within(g, [fd[0], 0, 0], slack=1e-3)


def test_euclidean_kernel_hessian_small_run():
    M = geo.euclidean(3)
    res = est.hess_kernel(M, None, None, np.array([1.0, 0, 0]), pth.BridgeSpec(1.0, 100), 8192, 5, frame0=E3)
    assert within(res["normalized"], np.diag([0.0, -1.0, -1.0]))
    # Hess log p = -I / T exactly
    assert within(res["log_hessian"], -E3)


def test_kernel_hessian_off_diagonal_vanishes_at_pole():
    M = geo.hyperbolic(3)
    res = est.hess_kernel(M, None, None, M.pole, pth.BridgeSpec(0.5, 50), 8192, 6)["normalized"]
    off = res.value[~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off) <= 3 * res.stderr[~np.eye(3, dtype=bool)])


def test_kernel_hessian_agrees_with_semigroup_chain():
    # p_1(., 0) = P_{1/2} p_{1/2}(., 0) on R^3 and p_{1/2}(., 0) = pi^{-3/2} exp(-|x|^2)
    M = geo.euclidean(3)
    x0 = np.array([0.7, 0.0, 0.0])
    ker = est.hess_kernel(M, None, None, x0, pth.BridgeSpec(1.0, 100), 8192, 7, frame0=E3)["normalized"]
    semi = est.hess_semigroup(M, None, est.RadialFunction("gauss"), x0, 0.5, 20, 40000, 8, frame0=E3)
    scale = math.pi**-1.5 / orc.exact_kernel("euclidean", 3, 1.0, 0.7)
    sym = lambda a: 0.5 * (a + a.T)  # noqa: E731
    diff = np.abs(sym(ker.value) - scale * sym(semi.value))
    err = np.hypot(ker.stderr, scale * semi.stderr)
    # six independent entries from two estimators: a family-wise 4 sigma gate
    assert np.all(diff <= 4 * err)


def test_theta_scan_reproduces_direct_estimate():
    M = geo.hyperbolic(3)
    w = geo.QuadraticWeight(0.2)
    x0 = geo.point_at(M, 1.0)
    spec = pth.BridgeSpec(0.5, 40)
    scan = est.hess_kernel_theta_scan(M, w, x0, spec, 512, 3, coefficients=(1.0, 0.5))
    for c in (1.0, 0.5):
        direct = est.hess_kernel(M, w, None, x0, spec, 512, 3, theta_coefficient=c)["normalized"]
        assert np.allclose(scan[c].value, direct.value, rtol=1e-10, atol=1e-10)


def test_kernel_hessian_worker_invariance():
    M = geo.hyperbolic(3)
    x0 = geo.point_at(M, 1.0)
    spec = pth.BridgeSpec(0.5, 20)
    a = est.hess_kernel(M, geo.QuadraticWeight(0.2), None, x0, spec, 600, 9, workers=1)["normalized"]
    b = est.hess_kernel(M, geo.QuadraticWeight(0.2), None, x0, spec, 600, 9, workers=2)["normalized"]
    assert np.array_equal(a.value, b.value)
    assert np.array_equal(a.stderr, b.stderr)


def test_stderr_scales_with_inverse_square_root():
    M = geo.hyperbolic(3)
    x0 = geo.point_at(M, 0.5)
    f = est.RadialFunction("gauss")
    errs = [
        float(est.feynman_kac_value(M, None, geo.ClippedDistancePotential(5.0), f, x0, 0.5, 10, n, 11).stderr)
        for n in (1000, 10000, 100000)
    ]
    for a, b in zip(errs, errs[1:]):
        assert 1 / 1.3 <= (a / b) / math.sqrt(10) <= 1.3
