"""Ground-truth values used to validate the estimators.

* closed-form heat kernels of ``1/2 Laplacian`` on R^n and H^3 and their radial
  derivatives;
* Hessians by finite differences along geodesic probes (normal coordinates),
  Richardson-extrapolated, with an error budget;
* finite differences of Monte Carlo path integrals under common random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fkhess import geometry as geo
from fkhess import paths as pth
from fkhess.reduce import map_paths, pairwise_mean, pairwise_sum, ratio_estimate


class OracleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# closed-form kernels
# ---------------------------------------------------------------------------


def _check_kind(kind: str, n: int):
    if kind == "euclidean" and n >= 1:
        return
    if kind == "hyperbolic" and n == 3:
        return
    raise OracleError(f"no closed-form kernel for kind={kind!r}, n={n}")


def exact_log_kernel(kind: str, n: int, t, d) -> np.ndarray:
    """log p_t(x, y) for 1/2 Laplacian as a function of d = d(x, y)."""
    _check_kind(kind, n)
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(t <= 0):
        raise OracleError("t must be positive")
    base = -0.5 * n * np.log(2 * np.pi * t) - d**2 / (2 * t)
    if kind == "euclidean":
        return base
    small = d < 1e-4
    ds = np.where(small, 1.0, d)
    log_ratio = np.where(small, d**2 / 6.0 - d**4 / 180.0, np.log(np.sinh(ds) / ds))
    return base - t / 2.0 - log_ratio


def exact_kernel(kind: str, n: int, t, d) -> np.ndarray:
    return np.exp(exact_log_kernel(kind, n, t, d))


def exact_log_kernel_radial_derivatives(kind: str, n: int, t: float, d: float) -> tuple[float, float]:
    """First and second derivatives of log p_t in the distance variable."""
    _check_kind(kind, n)
    if kind == "euclidean":
        return -d / t, -1.0 / t
    if d < 1e-4:
        return -d / t - d / 3.0, -1.0 / t - 1.0 / 3.0 + d**2 / 15.0
    return (
        -d / t - 1.0 / math.tanh(d) + 1.0 / d,
        -1.0 / t + 1.0 / math.sinh(d) ** 2 - 1.0 / d**2,
    )


def exact_kernel_hessian_ratio(kind: str, n: int, t: float, d: float) -> np.ndarray:
    """Hess p / p in the adapted frame (radial direction first)."""
    l1, l2 = exact_log_kernel_radial_derivatives(kind, n, t, d)
    if kind == "euclidean":
        m_l1 = -1.0 / t  # l1 * (1/d)
    else:
        m_l1 = l1 / math.tanh(d) if d > 1e-4 else -1.0 / t - 1.0 / 3.0
    out = np.eye(n) * m_l1
    out[0, 0] = l2 + l1**2
    return out


def exact_grad_log_kernel(kind: str, n: int, t: float, d: float) -> np.ndarray:
    l1, _ = exact_log_kernel_radial_derivatives(kind, n, t, d)
    out = np.zeros(n)
    out[0] = l1
    return out


def euclidean_mean_square_distance(n: int, t: float, d0: float) -> float:
    return d0**2 + n * t


def hyperbolic3_mean_square_distance(t: float, d0: float, nodes: int = 400) -> float:
    """E d^2(x_t, pole) for Brownian motion on H^3 started at distance d0.

    Evaluated by Gauss-Legendre quadrature of d^2 against the closed-form kernel
    in geodesic polar coordinates about the starting point, using the
    spherical mean of d(., pole)^2 computed by a second quadrature.
    """
    if d0 == 0.0:
        rmax = 12.0 * math.sqrt(t) + t + 2.0
        x, w = np.polynomial.legendre.leggauss(nodes)
        r = 0.5 * rmax * (x + 1)
        wr = 0.5 * rmax * w
        dens = exact_kernel("hyperbolic", 3, t, r) * 4 * np.pi * np.sinh(r) ** 2
        return float(np.sum(wr * dens * r**2))
    rmax = 12.0 * math.sqrt(t) + t + 2.0
    x, w = np.polynomial.legendre.leggauss(nodes)
    r = 0.5 * rmax * (x + 1)
    wr = 0.5 * rmax * w
    c, wc = np.polynomial.legendre.leggauss(nodes)  # cos of angle to the pole direction
    # hyperbolic law of cosines for the distance from the pole
    ch = np.cosh(d0) * np.cosh(r)[:, None] - np.sinh(d0) * np.sinh(r)[:, None] * c[None, :]
    dist = np.arccosh(np.maximum(ch, 1.0))
    sph_mean = 0.5 * np.sum(wc[None, :] * dist**2, axis=1)
    dens = exact_kernel("hyperbolic", 3, t, r) * 4 * np.pi * np.sinh(r) ** 2
    return float(np.sum(wr * dens * sph_mean))


# ---------------------------------------------------------------------------
# finite-difference Hessians along geodesic probes
# ---------------------------------------------------------------------------


@dataclass
class FdResult:
    value: np.ndarray
    budget: np.ndarray
    coarse: np.ndarray
    fine: np.ndarray


def probe_plan(n: int):
    """Frame-coordinate probe directions and the stencil combining them.

    Returns a list of directions and, for each Hessian entry (i, j), pairs of
    (direction index, coefficient) so that H_ij = sum coef * F(exp(s dir)) / s^2.
    """
    E = np.eye(n)
    dirs = [np.zeros(n)]
    index = {}

    def add(v):
        key = tuple(np.round(v, 12))
        if key not in index:
            index[key] = len(dirs)
            dirs.append(v)
        return index[key]

    stencil = {}
    for i in range(n):
        p, m = add(E[i]), add(-E[i])
        stencil[(i, i)] = [(p, 1.0), (m, 1.0), (0, -2.0)]
    for i in range(n):
        for j in range(i + 1, n):
            pp, mm = add(E[i] + E[j]), add(-E[i] - E[j])
            pm, mp = add(E[i] - E[j]), add(-E[i] + E[j])
            stencil[(i, j)] = [(pp, 0.25), (mm, 0.25), (pm, -0.25), (mp, -0.25)]
    return np.asarray(dirs), stencil


def probe_points(M: geo.ModelManifold, x0, frame0, dirs: np.ndarray, step: float):
    """Probe points exp_{x0}(step * dir) and the frames transported there."""
    x0 = np.asarray(x0, dtype=float)
    K = len(dirs)
    xs = np.broadcast_to(x0, (K, x0.shape[-1])).copy()
    us = np.broadcast_to(frame0, (K,) + frame0.shape).copy()
    w = geo.from_frame(us, step * dirs)
    return geo.exp_and_transport(M, xs, us, w)


def _assemble(values, stencil, n, step):
    H = np.zeros(values.shape[1:] + (n, n))
    for (i, j), terms in stencil.items():
        acc = sum(c * values[k] for k, c in terms) / step**2
        H[..., i, j] = acc
        H[..., j, i] = acc
    return H


def fd_hessian(field, M: geo.ModelManifold, x0, step: float = 1e-2, frame0=None) -> FdResult:
    """Hessian of ``field`` (batched points -> values) at x0 in a frame.

    Second differences along geodesic probes at steps ``step`` and
    ``step/2``, combined by Richardson extrapolation.  The budget is the
    extrapolation correction plus a rounding estimate.
    """
    if not 1e-4 <= step <= 1e-1:
        raise OracleError("step must lie in [1e-4, 1e-1]")
    frame0 = geo.adapted_frame(M, x0) if frame0 is None else np.asarray(frame0, float)
    n = M.n
    dirs, stencil = probe_plan(n)
    results = []
    for s in (step, step / 2):
        pts, _ = probe_points(M, x0, frame0, dirs, s)
        vals = np.asarray(field(pts), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise OracleError("field returned non-finite values at the probes")
        results.append((_assemble(vals, stencil, n, s), np.max(np.abs(vals)), s))
    (Hc, scale, s), (Hf, _, sf) = results
    H = (4.0 * Hf - Hc) / 3.0
    rounding = 8.0 * np.finfo(float).eps * scale / sf**2
    budget = np.abs(Hf - Hc) / 3.0 + rounding
    return FdResult(H, budget, Hc, Hf)


# ---------------------------------------------------------------------------
# finite differences of Monte Carlo path integrals (common random numbers)
# ---------------------------------------------------------------------------


@dataclass
class McFdResult:
    value: np.ndarray
    stderr: np.ndarray
    budget: np.ndarray
    n_paths: int


def _fk_probe_batch(idx, M, weight, V, f, t, steps, seed, probes, probe_frames):
    """Per-path FK integrands f(x_t) exp(-int V) started at each probe point."""
    out = np.empty((len(idx), len(probes)))
    shift_paths = M.kind == "euclidean" and (weight is None or weight.is_zero)
    base = None
    for p, (x, u) in enumerate(zip(probes, probe_frames)):
        if shift_paths:
            # flat and driftless: the probe path is the base path translated
            if base is None:
                base = pth.sample_h_bm(M, None, probes[0], t, steps, seed, idx, frame0=probe_frames[0])
            pts = base.points + (x - probes[0])
            dt = base.dt
        else:
            path = pth.sample_h_bm(M, weight, x, t, steps, seed, idx, frame0=u)
            pts, dt = path.points, path.dt
        vals = V(M, pts) if V is not None else np.zeros(pts.shape[:-1])
        integral = pth.trapezoid_prefix(vals, dt)[-1]
        out[:, p] = f(M, pts[-1]) * np.exp(-integral)
    return out


def nested_fk_reference(
    M: geo.ModelManifold, weight, V, f, t: float, x0, steps: int, n_paths: int, seed: int,
    step: float = 1e-2, frame0=None, workers=None,
) -> McFdResult:
    """Hessian of E[f(x_t) exp(-int_0^t V)] by geodesic-probe differences.

    All probes share the same Gaussian increments (common random numbers) and
    frames parallel transported from x0, so the per-path second differences are
    smooth; mean and stderr are taken over per-path Richardson-combined values.
    """
    frame0 = geo.adapted_frame(M, x0) if frame0 is None else np.asarray(frame0, float)
    n = M.n
    dirs, stencil = probe_plan(n)
    per_step = []
    for s in (step, step / 2):
        pts, frames = probe_points(M, x0, frame0, dirs, s)
        vals = map_paths(_fk_probe_batch, n_paths, M, weight, V, f, t, steps, seed, pts, frames, workers=workers)
        per_step.append(_assemble(vals.T, stencil, n, s))
    coarse, fine = per_step
    per_path = (4.0 * fine - coarse) / 3.0
    mean = pairwise_mean(per_path)
    stderr = np.sqrt(pairwise_sum((per_path - mean) ** 2) / (n_paths - 1) / n_paths)
    budget = np.abs(pairwise_mean(fine) - pairwise_mean(coarse)) / 3.0
    return McFdResult(mean, stderr, budget, n_paths)


def independent_probe_stderr(
    M: geo.ModelManifold, weight, V, f, t: float, x0, steps: int, n_paths: int, seed: int,
    step: float = 1e-2, frame0=None,
) -> np.ndarray:
    """Stderr of the plain second-difference Hessian when every probe uses its own seed.

    Reference point for the variance reduction achieved by common random numbers.
    """
    frame0 = geo.adapted_frame(M, x0) if frame0 is None else np.asarray(frame0, float)
    n = M.n
    dirs, stencil = probe_plan(n)
    pts, frames = probe_points(M, x0, frame0, dirs, step)
    var = np.zeros((n, n))
    means = []
    for p in range(len(dirs)):
        vals = map_paths(
            _fk_probe_batch, n_paths, M, weight, V, f, t, steps, seed + 7919 * (p + 1), pts[p : p + 1], frames[p : p + 1]
        )[:, 0]
        means.append(vals.var(ddof=1) / n_paths)
    means = np.asarray(means)
    for (i, j), terms in stencil.items():
        v = sum(c**2 * means[k] for k, c in terms) / step**4
        var[i, j] = var[j, i] = v
    return np.sqrt(var)


def _kernel_probe_batch(idx, M, weight, V, spec, seed, probes, probe_frames):
    out = np.empty((len(idx), len(probes)))
    for p, (x, u) in enumerate(zip(probes, probe_frames)):
        path = pth.sample_sc_bridge(M, spec, x, seed, idx, weight=weight, frame0=u)
        phi = geo.phi_h_radial(M, weight, path.r)
        log_w = pth.trapezoid_prefix(phi, path.dt)[-1]
        if V is not None:
            log_w = log_w - pth.trapezoid_prefix(V(M, path.points), path.dt)[-1]
        r0 = float(geo.pole_distance(M, x))
        log_pref = geo.log_k(M, spec.T, r0) + weight.eta(0.0) - weight.eta(r0)
        out[:, p] = np.exp(log_w + log_pref)
    return out


def kernel_hessian_radial_reference(
    M: geo.ModelManifold, weight, V, r0: float, spec: pth.BridgeSpec, n_paths: int, seed: int,
    step: float = 2e-2, workers=None,
) -> McFdResult:
    """Hess p / p at distance r0 from the pole for a radially symmetric kernel.

    For radial weight and potential the kernel p(., pole) = F(d(., pole)), so
    in the adapted frame Hess p / p = diag(F'', F' f'/f, ..., F' f'/f) / F.
    F is estimated by the elementary bridge formula at probe radii
    r0 + {-2, -1, 0, 1, 2} * step sharing common random numbers; F' and F''
    use five-point stencils per path, combined into a ratio against F(r0).
    The budget compares with the stencil at twice the step.
    """
    weight = geo.ZeroWeight() if weight is None else weight
    if r0 <= 4 * step:
        raise OracleError("r0 must exceed four probe steps")
    offsets = np.arange(-4, 5) * step
    probes = np.stack([geo.point_at(M, r0 + o) for o in offsets])
    frames = geo.adapted_frame(M, probes)
    vals = map_paths(_kernel_probe_batch, n_paths, M, weight, V, spec, seed, probes, frames, workers=workers)
    mid = 4

    def stencil(h_mult):
        v = lambda j: vals[:, mid + j * h_mult]  # noqa: E731
        h = step * h_mult
        d1 = (v(-2) - 8 * v(-1) + 8 * v(1) - v(2)) / (12 * h)
        d2 = (-v(-2) + 16 * v(-1) - 30 * v(0) + 16 * v(1) - v(2)) / (12 * h**2)
        return d1, d2

    fr = geo.radial_scalars(M, np.array(r0))
    m = 1.0 / r0 + float(fr.lp)
    n = M.n

    def matrix(d1, d2):
        X = np.zeros((len(d1), n, n))
        X[:, 0, 0] = d2
        for i in range(1, n):
            X[:, i, i] = d1 * m
        return X

    X1 = matrix(*stencil(1))
    X2 = matrix(*stencil(2))
    est = ratio_estimate(X1, vals[:, mid], seed)
    coarse = ratio_estimate(X2, vals[:, mid], seed).value
    budget = np.abs(est.value - coarse) / 15.0
    return McFdResult(est.value, est.stderr, budget, n_paths)
