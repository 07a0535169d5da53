"""Monte Carlo estimators for derivatives of heat semigroups and kernels.

Every estimator is a per-path sample function evaluated on batches of paths
(``_*_batch``), followed by a deterministic reduction into an ``McEstimate``.
Hessians are returned as full matrices in a frame at the starting point
(default: the adapted frame whose first vector points away from the pole).

Notation for the per-path terms, with prefix sums I(k) = sum_{j<k} A_j^T dM_j:

* N_a[i, j] = (4/a^2) (I(a) - I(a/2))_i I(a/2)_j
* Q_a[i, j] = (2/a) sum_{k < a/2} <dM_k, W2_k(e_i, e_j)>
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fkhess import geometry as geo
from fkhess import paths as pth
from fkhess import transport as tr
from fkhess.reduce import McEstimate, map_paths, mean_estimate, pairwise_mean, pairwise_sum, ratio_estimate

DEFAULT_R_NODES = 64


# ---------------------------------------------------------------------------
# picklable test functions on M (evaluated on batches of ambient points)
# ---------------------------------------------------------------------------


class TestFunction:
    def __call__(self, M, x):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.__dict__})"


class ConstantFunction(TestFunction):
    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def __call__(self, M, x):
        return np.full(np.shape(x)[:-1], self.value)


class CoordinateFunction(TestFunction):
    """``x -> scale * x[index]**power`` in ambient coordinates."""

    def __init__(self, index: int, power: int = 1, scale: float = 1.0):
        self.index, self.power, self.scale = int(index), int(power), float(scale)

    def __call__(self, M, x):
        return self.scale * np.asarray(x)[..., self.index] ** self.power


class RadialFunction(TestFunction):
    """``x -> g(d(x, pole))`` for a named profile g."""

    PROFILES = {
        "cosh": np.cosh,
        "gauss": lambda r: np.exp(-(r**2)),
        "square": lambda r: r**2,
    }

    def __init__(self, name: str):
        if name not in self.PROFILES:
            raise ValueError(f"unknown radial profile {name!r}")
        self.name = name

    def __call__(self, M, x):
        return self.PROFILES[self.name](geo.pole_distance(M, x))


# ---------------------------------------------------------------------------
# per-path Hessian terms
# ---------------------------------------------------------------------------


def hessian_terms(trace: tr.TransportTrace, a_index: int, half_index: int, a: float) -> np.ndarray:
    """N_a + Q_a for every path, shape (B, n, n)."""
    early = trace.cum_AdM[half_index]
    late = trace.cum_AdM[a_index] - early
    N = (4.0 / a**2) * late[:, :, None] * early[:, None, :]
    Q = (2.0 / a) * trace.cum_W2dM[half_index]
    return N + Q


@dataclass
class QuadratureNodes:
    """Nodes of the integral over intermediate times a in (0, t].

    The integrand behaves like a^{-1/2} near a = 0, so the rule is a
    trapezoid in s = sqrt(a): int_0^t G(a) da = int_0^sqrt(t) 2 s G(s^2) ds.
    Nodes are snapped to grid indices whose half is also a grid index.
    """

    a_index: np.ndarray
    half_index: np.ndarray
    a: np.ndarray
    weights: np.ndarray  # multiply G(a_j); already includes the 2 s ds factor


def quadrature_nodes(path: pth.PathRecord, t_index: int, count: int) -> QuadratureNodes:
    """Square-root-spaced nodes on even uniform-grid indices up to ``t_index``."""
    if count < 2:
        raise ValueError("need at least two quadrature nodes")
    times = path.times
    t = times[t_index]
    # uniform part of the grid: indices k with times[k] = k * delta
    delta = times[1] - times[0]
    uniform = np.nonzero(np.abs(times - np.arange(len(times)) * delta) < 1e-9 * max(1.0, t))[0]
    max_even = [k for k in uniform if k % 2 == 0 and k <= t_index]
    if len(max_even) < count:
        raise ValueError(
            f"r_nodes={count} exceeds the grid resolution ({len(max_even)} usable grid points); use more steps"
        )
    picks = []
    for j in range(1, count + 1):
        target = t * (j / count) ** 2
        k = 2 * int(round(target / (2 * delta)))
        picks.append(max(2, k))
    picks[-1] = t_index
    picks = sorted(set(picks))
    a_index = np.asarray(picks)
    a = times[a_index]
    half = np.asarray([path.step_index(0.5 * v) for v in a])
    s = np.concatenate([[0.0], np.sqrt(a)])
    ds = np.diff(s)
    # trapezoid in s with the s = 0 node contributing zero
    w = np.zeros(len(a))
    w += 0.5 * ds
    w[:-1] += 0.5 * ds[1:]
    weights = 2.0 * np.sqrt(a) * w
    return QuadratureNodes(a_index, half, a, weights)


# ---------------------------------------------------------------------------
# semigroup estimators (h-Brownian motion)
# ---------------------------------------------------------------------------


def _bm_paths(M, weight, x0, t, steps, seed, idx, frame0, keep_final_frames=False):
    return pth.sample_h_bm(M, weight, x0, t, steps, seed, idx, frame0=frame0)


def _grad_semigroup_batch(idx, M, weight, f, x0, t, steps, seed, frame0):
    path = _bm_paths(M, weight, x0, t, steps, seed, idx, frame0)
    trace = tr.evolve_W(M, weight, path, keep=False)
    fx = f(M, path.points[-1])
    return fx[:, None] * trace.cum_AdM[-1] / t


def grad_semigroup(M, weight, f, x0, t, steps, n_paths, seed, frame0=None, workers=None) -> McEstimate:
    """Gradient of P_t^h f at x0 in a frame: (1/t) E[f(x_t) int_0^t <dM, W e_i>]."""
    _check_steps(steps)
    samples = map_paths(_grad_semigroup_batch, n_paths, M, weight, f, x0, t, steps, seed, frame0, workers=workers)
    return mean_estimate(samples, seed)


def _hess_semigroup_batch(idx, M, weight, f, x0, t, steps, seed, frame0, theta_coefficient):
    path = _bm_paths(M, weight, x0, t, steps, seed, idx, frame0)
    trace = tr.evolve_W(M, weight, path, keep=True)
    half = steps // 2
    tr.evolve_W2(M, weight, path, trace, half, theta_coefficient)
    fx = f(M, path.points[-1])
    return fx[:, None, None] * hessian_terms(trace, steps, half, t)


def hess_semigroup(
    M, weight, f, x0, t, steps, n_paths, seed, frame0=None, theta_coefficient=tr.DEFAULT_THETA_COEFFICIENT, workers=None
) -> McEstimate:
    """Hessian of P_t^h f at x0: E[f(x_t) (N_t + Q_t)]."""
    _check_steps(steps)
    samples = map_paths(
        _hess_semigroup_batch, n_paths, M, weight, f, x0, t, steps, seed, frame0, theta_coefficient, workers=workers
    )
    return mean_estimate(samples, seed)


def _hess_pathwise_batch(idx, M, weight, grad_f, hess_f, x0, t, steps, seed, frame0, theta_coefficient):
    path = pth.sample_h_bm(M, weight, x0, t, steps, seed, idx, frame0=frame0)
    trace = tr.evolve_W(M, weight, path, keep=True)
    tr.evolve_W2(M, weight, path, trace, steps, theta_coefficient, keep=True)
    xT, uT = path.points[-1], path.frames
    g = grad_f(M, xT, uT)  # (B, n) frame coordinates
    H = hess_f(M, xT, uT)  # (B, n, n)
    A = trace.A_final
    first = np.einsum("bki,bkl,blj->bij", A, H, A)
    second = np.einsum("bijd,bd->bij", trace.W2[-1], g)
    return first + second


def hess_semigroup_pathwise(
    M, weight, grad_f, hess_f, x0, t, steps, n_paths, seed, frame0=None,
    theta_coefficient=tr.DEFAULT_THETA_COEFFICIENT, workers=None,
) -> McEstimate:
    """Hessian of P_t^h f from E[Hess f(W e_i, W e_j) + df(W2(e_i, e_j))].

    ``grad_f``/``hess_f`` return frame coordinates at the endpoint given the
    endpoint points and frames.  Used to validate W2 independently of the
    integration-by-parts weights.
    """
    _check_steps(steps)
    samples = map_paths(
        _hess_pathwise_batch, n_paths, M, weight, grad_f, hess_f, x0, t, steps, seed, frame0, theta_coefficient,
        workers=workers,
    )
    return mean_estimate(samples, seed)


def _fk_batch(idx, M, weight, V, f, x0, t, steps, seed, frame0, r_nodes, theta_coefficient):
    path = _bm_paths(M, weight, x0, t, steps, seed, idx, frame0)
    trace = tr.evolve_W(M, weight, path, keep=True)
    half = steps // 2
    tr.evolve_W2(M, weight, path, trace, half, theta_coefficient)
    fx = f(M, path.points[-1])
    U = V(M, path.points) - float(V(M, np.asarray(x0)[None])[0])
    cumU = pth.trapezoid_prefix(U, path.dt)
    main = hessian_terms(trace, steps, half, t)
    nodes = quadrature_nodes(path, steps, r_nodes)
    corr = np.zeros_like(main)
    for ka, kh, a, w in zip(nodes.a_index, nodes.half_index, nodes.a, nodes.weights):
        vv = U[ka] * np.exp(-(cumU[-1] - cumU[ka]))
        corr += w * vv[:, None, None] * hessian_terms(trace, ka, kh, a)
    return fx[:, None, None] * (main - corr)


def hess_feynman_kac(
    M, weight, V, f, x0, t, steps, n_paths, seed, r_nodes=DEFAULT_R_NODES, frame0=None,
    theta_coefficient=tr.DEFAULT_THETA_COEFFICIENT, workers=None,
) -> McEstimate:
    """Hessian of P_t^{h,V} f at x0.

    With U = V - V(x0) and VV_{a,t} = U(x_a) exp(-int_a^t U):
    e^{V(x0) t} Hess P_t^{h,V} f = E[f (N_t + Q_t)] - int_0^t E[f VV_{a,t} (N_a + Q_a)] da.
    """
    _check_steps(steps)
    samples = map_paths(
        _fk_batch, n_paths, M, weight, V, f, x0, t, steps, seed, frame0, r_nodes, theta_coefficient, workers=workers
    )
    est = mean_estimate(samples, seed)
    scale = math.exp(-float(V(M, np.asarray(x0)[None])[0]) * t)
    return McEstimate(est.value * scale, est.stderr * scale, est.n_paths, seed, {"r_nodes": r_nodes})


def _fk_value_batch(idx, M, weight, V, f, x0, t, steps, seed, frame0):
    path = _bm_paths(M, weight, x0, t, steps, seed, idx, frame0)
    vals = np.zeros(path.r.shape) if V is None else V(M, path.points)
    integral = pth.trapezoid_prefix(vals, path.dt)[-1]
    return f(M, path.points[-1]) * np.exp(-integral)


def feynman_kac_value(M, weight, V, f, x0, t, steps, n_paths, seed, frame0=None, workers=None) -> McEstimate:
    """E[f(x_t) exp(-int_0^t V(x_s) ds)] (plain path integral)."""
    samples = map_paths(_fk_value_batch, n_paths, M, weight, V, f, x0, t, steps, seed, frame0, workers=workers)
    return mean_estimate(samples, seed)


# ---------------------------------------------------------------------------
# kernel estimators (semi-classical bridge)
# ---------------------------------------------------------------------------


def _kernel_prefactor(M, weight, x0, T):
    """log of k_T(x0, pole) e^{h(pole) - h(x0)}."""
    r0 = float(geo.pole_distance(M, np.asarray(x0)))
    return float(geo.log_k(M, T, r0) + weight.eta(0.0) - weight.eta(r0))


def _bridge_log_weights(M, weight, V, x0, path):
    """Per-path int_0^T Phi^h and, when V is given, int_0^T U with U = V - V(x0)."""
    phi = geo.phi_h_radial(M, weight, path.r)
    log_beta = pth.trapezoid_prefix(phi, path.dt)[-1]
    if V is None:
        return log_beta, None, None
    U = V(M, path.points) - float(V(M, np.asarray(x0)[None])[0])
    cumU = pth.trapezoid_prefix(U, path.dt)
    return log_beta, U, cumU


def _kernel_elementary_batch(idx, M, weight, V, x0, spec, seed, frame0):
    path = pth.sample_sc_bridge(M, spec, x0, seed, idx, weight=weight, frame0=frame0)
    log_beta, U, cumU = _bridge_log_weights(M, weight, V, x0, path)
    if V is not None:
        log_beta = log_beta - cumU[-1]
    return np.exp(log_beta)


def kernel_elementary(M, weight, V, x0, spec: pth.BridgeSpec, n_paths, seed, frame0=None, workers=None) -> McEstimate:
    """p_T^{h,V}(x0, pole) = k_T e^{h(pole) - h(x0)} E[exp int_0^T (Phi^h - V)]."""
    geo.require_pole(M)
    weight = geo.ZeroWeight() if weight is None else weight
    samples = map_paths(_kernel_elementary_batch, n_paths, M, weight, V, x0, spec, seed, frame0, workers=workers)
    est = mean_estimate(samples, seed)
    shift = 0.0 if V is None else float(V(M, np.asarray(x0)[None])[0])
    scale = math.exp(_kernel_prefactor(M, weight, x0, spec.T) - shift * spec.T)
    return McEstimate(est.value * scale, est.stderr * scale, est.n_paths, seed, {"log_prefactor": math.log(scale)})


def _kernel_derivative_batch(idx, M, weight, V, x0, spec, seed, frame0, r_nodes, want_hessian, theta_coefficient):
    path = pth.sample_sc_bridge(M, spec, x0, seed, idx, weight=weight, frame0=frame0)
    log_beta, U, cumU = _bridge_log_weights(M, weight, V, x0, path)
    beta = np.exp(log_beta)
    S = path.steps
    trace = tr.evolve_W(M, weight, path, keep=want_hessian)
    out = {"beta": beta, "grad": beta[:, None] * trace.cum_AdM[S] / spec.T}
    if not want_hessian:
        return out
    half = spec.steps // 2
    tr.evolve_W2(M, weight, path, trace, half, theta_coefficient)
    X = beta[:, None, None] * hessian_terms(trace, S, half, spec.T)
    if V is None:
        out["denominator"] = beta
    else:
        out["denominator"] = beta * np.exp(-cumU[-1])
        nodes = quadrature_nodes(path, S, r_nodes)
        corr = np.zeros_like(X)
        for ka, kh, a, w in zip(nodes.a_index, nodes.half_index, nodes.a, nodes.weights):
            vv = U[ka] * np.exp(-(cumU[-1] - cumU[ka]))
            corr += w * (beta * vv)[:, None, None] * hessian_terms(trace, ka, kh, a)
        X = X - corr
    out["hess"] = X
    return out


def _run_kernel(M, weight, V, x0, spec, n_paths, seed, frame0, r_nodes, want_hessian, theta_coefficient, workers):
    geo.require_pole(M)
    if want_hessian and spec.steps % 2:
        raise ValueError("hessian estimators need an even number of steps")
    weight = geo.ZeroWeight() if weight is None else weight
    return map_paths(
        _kernel_derivative_batch, n_paths, M, weight, V, x0, spec, seed, frame0, r_nodes, want_hessian,
        theta_coefficient, workers=workers,
    ), weight


def grad_kernel(M, weight, x0, spec: pth.BridgeSpec, n_paths, seed, frame0=None, workers=None) -> dict:
    """Gradient of p_T^h(., pole) at x0 and of its logarithm (ratio form)."""
    res, weight = _run_kernel(M, weight, None, x0, spec, n_paths, seed, frame0, 2, False, 1.0, workers)
    scale = math.exp(_kernel_prefactor(M, weight, x0, spec.T))
    g = mean_estimate(res["grad"], seed)
    grad_p = McEstimate(g.value * scale, g.stderr * scale, g.n_paths, seed)
    grad_log = ratio_estimate(res["grad"], res["beta"], seed)
    return {"grad": grad_p, "grad_log": grad_log}


def hess_kernel(
    M, weight, V, x0, spec: pth.BridgeSpec, n_paths, seed, r_nodes=DEFAULT_R_NODES, frame0=None,
    theta_coefficient=tr.DEFAULT_THETA_COEFFICIENT, workers=None,
) -> dict:
    """Hessian of the kernel p_T^{h,V}(., pole) at x0.

    Returns a dict with
    * ``relative``: e^{h(x0) - h(pole) + V(x0) T} Hess p / k_T (mean form),
    * ``normalized``: Hess p / p (self-normalized ratio form),
    * ``log_hessian``: Hess log p = Hess p / p - grad log p (x) grad log p,
      available when V is None,
    * ``grad_log``: grad log p when V is None.
    """
    res, weight = _run_kernel(M, weight, V, x0, spec, n_paths, seed, frame0, r_nodes, True, theta_coefficient, workers)
    out = {
        "relative": mean_estimate(res["hess"], seed),
        "normalized": ratio_estimate(res["hess"], res["denominator"], seed),
    }
    if V is None:
        out["grad_log"] = ratio_estimate(res["grad"], res["beta"], seed)
        out["log_hessian"] = _log_hessian(res["hess"], res["grad"], res["beta"], seed)
    return out


def _theta_scan_batch(idx, M, weight, x0, spec, seed, frame0):
    path = pth.sample_sc_bridge(M, spec, x0, seed, idx, weight=weight, frame0=frame0)
    log_beta, _, _ = _bridge_log_weights(M, weight, None, x0, path)
    beta = np.exp(log_beta)
    S, half = path.steps, spec.steps // 2
    trace = tr.evolve_W(M, weight, path, keep=True)
    parts = []
    for c in (0.0, 1.0):
        tr.evolve_W2(M, weight, path, trace, half, c)
        parts.append(beta[:, None, None] * hessian_terms(trace, S, half, spec.T))
    return {"beta": beta, "base": parts[0], "theta": parts[1] - parts[0]}


def hess_kernel_theta_scan(
    M, weight, x0, spec: pth.BridgeSpec, n_paths, seed, coefficients=(1.0, -1.0, 0.5, -0.5), frame0=None, workers=None,
) -> dict:
    """Hess p / p for several Theta^h coefficients on one shared set of paths.

    W2 depends affinely on the coefficient, so two transport solves per path
    (coefficients 0 and 1) give every requested coefficient exactly.
    """
    geo.require_pole(M)
    _check_steps(spec.steps)
    weight = geo.ZeroWeight() if weight is None else weight
    res = map_paths(_theta_scan_batch, n_paths, M, weight, x0, spec, seed, frame0, workers=workers)
    return {float(c): ratio_estimate(res["base"] + c * res["theta"], res["beta"], seed) for c in coefficients}


def _log_hessian(X, Y, D, seed) -> McEstimate:
    """mean X / mean D - g g^T with g = mean Y / mean D, delta-method stderr."""
    m = X.shape[0]
    mD = float(pairwise_mean(D))
    H = pairwise_mean(X) / mD
    g = pairwise_mean(Y) / mD
    value = H - np.outer(g, g)
    infl_H = (X - H[None] * D[:, None, None]) / mD
    infl_g = (Y - g[None] * D[:, None]) / mD
    infl = infl_H - infl_g[:, :, None] * g[None, None, :] - g[None, :, None] * infl_g[:, None, :]
    var = pairwise_sum(infl**2) / max(m - 1, 1)
    return McEstimate(value, np.sqrt(var / m), m, seed)


def _check_steps(steps):
    if steps < 2 or steps % 2:
        raise ValueError("steps must be an even integer >= 2")
