import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fkhess import estimators as est
from fkhess import geometry as geo
from fkhess import oracles as orc
from fkhess import paths as pth


def test_kernel_examples():
    assert math.isclose(orc.exact_kernel("euclidean", 1, 1.0, 0.0), (2 * math.pi) ** -0.5, rel_tol=1e-14)
    at_pole = (2 * math.pi) ** -1.5 * math.exp(-0.5)
    assert math.isclose(orc.exact_kernel("hyperbolic", 3, 1.0, 1e-9), at_pole, rel_tol=1e-12)
    assert math.isclose(orc.exact_kernel("hyperbolic", 3, 1.0, 0.0), at_pole, rel_tol=1e-14)
    expected = (2 * math.pi) ** -1.5 * math.exp(-1.0) / math.sinh(1.0)
    assert math.isclose(orc.exact_kernel("hyperbolic", 3, 1.0, 1.0), expected, rel_tol=1e-14)


@pytest.mark.parametrize("kind, n", [("hyperbolic", 2), ("sphere", 3), ("warped", 3)])
def test_unsupported_kernels_rejected(kind, n):
    with pytest.raises(orc.OracleError):
        orc.exact_kernel(kind, n, 1.0, 0.5)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_euclidean_kernel_has_unit_mass(n):
    x, w = np.polynomial.hermite.hermgauss(40)
    t = 0.7
    # substitute y = sqrt(2 t) x per coordinate
    grids = np.meshgrid(*([x] * n), indexing="ij")
    weights = np.prod(np.meshgrid(*([w] * n), indexing="ij"), axis=0)
    d = np.sqrt(2 * t * sum(g**2 for g in grids))
    vals = orc.exact_kernel("euclidean", n, t, d) * np.exp(d**2 / (2 * t))
    total = np.sum(weights * vals) * (2 * t) ** (n / 2)
    assert abs(total - 1.0) < 1e-8


@settings(max_examples=60, deadline=None)
@given(r=st.floats(1e-3, 5.0), t=st.floats(0.05, 3.0))
def test_hyperbolic_kernel_solves_radial_heat_equation(r, t):
    l1, l2 = orc.exact_log_kernel_radial_derivatives("hyperbolic", 3, t, r)
    dt_log = -1.5 / t - 0.5 + r**2 / (2 * t**2)
    residual = dt_log - 0.5 * (l2 + l1**2 + 2 * l1 / math.tanh(r))
    assert abs(residual) <= 1e-6 * (1 + abs(dt_log))


@settings(max_examples=30, deadline=None)
@given(r=st.floats(0.05, 3.0), t=st.floats(0.1, 2.0))
def test_radial_derivatives_match_differences(r, t):
    lk = lambda d: orc.exact_log_kernel("hyperbolic", 3, t, d)  # noqa: E731
    h = 1e-4
    l1, l2 = orc.exact_log_kernel_radial_derivatives("hyperbolic", 3, t, r)
    assert abs((lk(r + h) - lk(r - h)) / (2 * h) - l1) < 1e-6 * (1 + abs(l1))
    assert abs((lk(r + h) - 2 * lk(r) + lk(r - h)) / h**2 - l2) < 1e-4 * (1 + abs(l2))


# ---------------------------------------------------------------------------
# finite-difference Hessians
# ---------------------------------------------------------------------------


def test_fd_hessian_examples():
    M = geo.euclidean(3)
    x0 = np.array([0.3, -0.2, 0.5])
    res = orc.fd_hessian(lambda p: np.sum(p**2, axis=-1), M, x0, frame0=np.eye(3))
    assert np.allclose(res.value, 2 * np.eye(3), atol=1e-8)
    for N in (M, geo.hyperbolic(3), geo.sphere(2)):
        y = geo.point_at(N, 0.4)
        zero = orc.fd_hessian(lambda p: np.full(p.shape[0], 3.0), N, y)
        assert np.all(zero.value == 0)
    H = geo.hyperbolic(3)
    res = orc.fd_hessian(lambda p: np.cosh(geo.pole_distance(H, p)), H, geo.point_at(H, 1.0))
    assert np.allclose(res.value, math.cosh(1.0) * np.eye(3), atol=1e-6)


def test_fd_hessian_rejects_bad_input():
    M = geo.euclidean(2)
    with pytest.raises(orc.OracleError):
        orc.fd_hessian(lambda p: p[:, 0], M, np.zeros(2), step=1.0)
    with pytest.raises(orc.OracleError):
        orc.fd_hessian(lambda p: np.where(p[:, 0] > 0, np.inf, 0.0), M, np.zeros(2), step=1e-2)


@settings(max_examples=20, deadline=None)
@given(
    x=st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3),
    t=st.floats(0.3, 2.0),
)
def test_fd_hessian_of_euclidean_kernel(x, t):
    M = geo.euclidean(3)
    x0 = np.asarray(x)
    field = lambda p: orc.exact_kernel("euclidean", 3, t, np.linalg.norm(p, axis=-1))  # noqa: E731
    res = orc.fd_hessian(field, M, x0, frame0=np.eye(3))
    p = orc.exact_kernel("euclidean", 3, t, np.linalg.norm(x0))
    exact = -p * (np.eye(3) / t - np.outer(x0, x0) / t**2)
    assert np.allclose(res.value, exact, atol=1e-6)
    assert np.all(res.budget < 1e-4)


@pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
def test_fd_hessian_of_hyperbolic_kernel(r):
    M = geo.hyperbolic(3)
    x0 = geo.point_at(M, r)
    field = lambda p: orc.exact_kernel("hyperbolic", 3, 0.5, geo.pole_distance(M, p))  # noqa: E731
    res = orc.fd_hessian(field, M, x0)
    ratio = res.value / orc.exact_kernel("hyperbolic", 3, 0.5, r)
    assert np.allclose(ratio, orc.exact_kernel_hessian_ratio("hyperbolic", 3, 0.5, r), atol=1e-5)


def test_hyperbolic_hessian_ratio_values():
    H = orc.exact_kernel_hessian_ratio("hyperbolic", 3, 0.5, 1.0)
    assert abs(H[0, 0] - 3.0742) < 1e-4
    assert abs(H[1, 1] - (-3.0371)) < 1e-4


# ---------------------------------------------------------------------------
# Monte Carlo references
# ---------------------------------------------------------------------------


def test_nested_reference_flat_square():
    M = geo.euclidean(3)
    f = est.CoordinateFunction(0, 2)
    ref = orc.nested_fk_reference(M, None, None, f, 0.5, np.array([0.2, 0.1, 0]), 10, 2048, 0, frame0=np.eye(3))
    assert np.allclose(ref.value, 2 * np.outer([1, 0, 0], [1, 0, 0]), atol=1e-6)


def test_nested_reference_constant_potential():
    M = geo.hyperbolic(3)
    f = est.RadialFunction("gauss")
    x0 = geo.point_at(M, 0.5)
    base = orc.nested_fk_reference(M, None, None, f, 0.5, x0, 20, 1024, 1)
    shifted = orc.nested_fk_reference(M, None, geo.ConstantPotential(0.3), f, 0.5, x0, 20, 1024, 1)
    assert np.allclose(shifted.value, math.exp(-0.15) * base.value, rtol=1e-9, atol=1e-12)


def test_common_random_numbers_reduce_variance():
    M = geo.euclidean(3)
    V = geo.ClippedDistancePotential(10.0)
    f = est.ConstantFunction()
    x0 = np.array([0.3, 0.2, 0.0])
    crn = orc.nested_fk_reference(M, None, V, f, 0.5, x0, 20, 4096, 2, frame0=np.eye(3))
    ind = orc.independent_probe_stderr(M, None, V, f, 0.5, x0, 20, 4096, 2, frame0=np.eye(3))
    assert np.all(ind >= 5 * crn.stderr)


def test_radial_kernel_reference_on_hyperbolic_space():
    M = geo.hyperbolic(3)
    ref = orc.kernel_hessian_radial_reference(M, None, None, 1.0, pth.BridgeSpec(0.5, 100), 512, 0)
    exact = orc.exact_kernel_hessian_ratio("hyperbolic", 3, 0.5, 1.0)
    assert np.allclose(ref.value, exact, atol=1e-5)


def test_hyperbolic_mean_square_distance_quadrature():
    # continuity in the starting distance and the short-time expansion 3t + t^2
    at_pole = orc.hyperbolic3_mean_square_distance(0.01, 0.0)
    assert abs(at_pole - (0.03 + 1e-4)) < 2e-6
    near = orc.hyperbolic3_mean_square_distance(1.0, 1e-3)
    assert abs(near - orc.hyperbolic3_mean_square_distance(1.0, 0.0)) < 1e-4
