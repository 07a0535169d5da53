"""Damped and doubly damped parallel translation in frame coordinates.

Along a path with parallel frames ``u_k`` the damped translation W satisfies
``dA/dt = G A`` in frame coordinates, where ``G`` is the matrix of
``-1/2 Ric + Hess h``.  The doubly damped translation W2(v1, v2) is driven by
``G``, by Theta^h(W v2)(W v1) dt, and by the curvature against the martingale
increments, R(dM, W v2) W v1.  Everything is vectorized over paths and, for
W2, over all ordered pairs of frame vectors (v1, v2) = (e_i, e_j).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fkhess import geometry as geo
from fkhess.paths import PathRecord

# Coefficient in front of Theta^h in the W2 equation.  See the README section
# on conventions: +1 is the value that reproduces finite-difference Hessians
# of closed-form kernels; +-1/2 are kept selectable for comparison runs.
DEFAULT_THETA_COEFFICIENT = 1.0


@dataclass
class TransportTrace:
    """Frame-coordinate transport data for a batch of paths.

    A: (S+1, B, n, n) matrices of W, present when requested.
    A_final: (B, n, n)
    log_bound: (S+1, B) running integral of the largest eigenvalue of
        -Ric + 2 Hess h, so that ||A_k||^2 <= exp(log_bound[k]).
    cum_AdM: (S+1, B, n) prefix sums sum_{j<k} A_j^T dM_j, i.e. the Ito
        integrals int <dM, W e_i>.
    W2_horizon: number of steps over which W2 was evolved.
    cum_W2dM: (W2_horizon+1, B, n, n) prefix sums of <dM_j, W2_j(e_a, e_b)>.
    W2: (W2_horizon+1, B, n, n, n) W2 trajectories when requested.
    """

    A: np.ndarray | None
    A_final: np.ndarray
    log_bound: np.ndarray
    cum_AdM: np.ndarray
    W2_horizon: int = 0
    cum_W2dM: np.ndarray | None = None
    W2: np.ndarray | None = None
    theta_coefficient: float = DEFAULT_THETA_COEFFICIENT
    coefficients: geo.TensorCoefficients | None = None


def expm_symmetric(mats: np.ndarray, scale) -> np.ndarray:
    """exp(scale * G) for a batch of symmetric matrices via eigendecomposition."""
    vals, vecs = np.linalg.eigh(mats)
    ev = np.exp(np.asarray(scale)[..., None] * vals)
    return np.einsum("...ik,...k,...jk->...ij", vecs, ev, vecs)


def generator(M: geo.ModelManifold, weight: geo.RadialWeight, path: PathRecord, k: int) -> np.ndarray:
    """Frame matrix of -1/2 Ric + Hess h at step k, shape (B, n, n)."""
    return geo.damping_matrix(M, weight, path.r[k], path.nv[k])


def evolve_W(
    M: geo.ModelManifold,
    weight: geo.RadialWeight | None,
    path: PathRecord,
    keep: bool = True,
    coefficients: geo.TensorCoefficients | None = None,
) -> TransportTrace:
    """Integrate W with the exponential integrator A_{k+1} = exp(dt_k G_k) A_k.

    G_k = damp_rad N⊗N + damp_tan P is a radial operator, so its exponential
    is e^{dt damp_tan} I + (e^{dt damp_rad} - e^{dt damp_tan}) N⊗N exactly.
    """
    weight = geo.ZeroWeight() if weight is None else weight
    S, B, n = path.steps, path.batch, path.dM.shape[-1]
    tc = geo.tensor_coefficients(M, weight, path.r) if coefficients is None else coefficients
    # columns of A are the images W e_i; store as rows: cols[b, i] = A e_i
    cols = np.broadcast_to(np.eye(n), (B, n, n)).copy()
    A_all = np.empty((S + 1, B, n, n)) if keep else None
    cum = np.zeros((S + 1, B, n))
    lam = np.maximum(tc.damp_rad, tc.damp_tan)
    log_bound = np.zeros((S + 1, B))
    log_bound[1:] = np.cumsum(2.0 * lam[:-1] * path.dt[:, None], axis=0)
    flat = M.kind == "euclidean" and weight.is_zero
    for k in range(S):
        if keep:
            A_all[k] = np.swapaxes(cols, 1, 2)
        cum[k + 1] = cum[k] + np.einsum("bid,bd->bi", cols, path.dM[k])
        if not flat:
            step = tc.take(k, expand=1)
            cols = geo.apply_damping_exp(step, path.nv[k][:, None, :], path.dt[k], cols)
    A = np.swapaxes(cols, 1, 2)
    if keep:
        A_all[S] = A
    return TransportTrace(A_all, A, log_bound, cum, coefficients=tc)


def half_index(path: PathRecord, t: float | None = None) -> int:
    """Grid index of the midpoint of [0, t] (t defaults to the path horizon)."""
    t = path.times[-1] if t is None else t
    return path.step_index(0.5 * t)


def evolve_W2(
    M: geo.ModelManifold,
    weight: geo.RadialWeight | None,
    path: PathRecord,
    trace: TransportTrace,
    horizon: int,
    theta_coefficient: float = DEFAULT_THETA_COEFFICIENT,
    keep: bool = False,
) -> TransportTrace:
    """Integrate W2(e_i, e_j) for all pairs up to grid index ``horizon``.

    Update: b_{k+1} = exp(dt G_k) [b_k + c dt Theta^h(A e_j)(A e_i)
    + R(dM_k, A e_j) A e_i] with b_0 = 0 and c the theta coefficient.
    The result is stored in ``trace`` (cum_W2dM and optionally W2).
    """
    if trace.A is None:
        raise ValueError("evolve_W2 needs the full W trajectory (evolve_W keep=True)")
    weight = geo.ZeroWeight() if weight is None else weight
    tc = trace.coefficients
    if tc is None:
        tc = geo.tensor_coefficients(M, weight, path.r)
    B, n = path.batch, path.dM.shape[-1]
    b = np.zeros((B, n, n, n))
    cum = np.zeros((horizon + 1, B, n, n))
    W2 = np.zeros((horizon + 1, B, n, n, n)) if keep else None
    flat = M.kind == "euclidean"
    theta_zero = M.is_space_form and weight.is_zero
    for k in range(horizon):
        cum[k + 1] = cum[k] + np.einsum("bijd,bd->bij", b, path.dM[k])
        if flat and weight.is_zero:
            continue
        cols = np.swapaxes(trace.A[k], 1, 2)  # cols[b, i] = A e_i
        v1 = cols[:, :, None, :]
        v2 = cols[:, None, :, :]
        nv = path.nv[k][:, None, None, :]
        step = tc.take(k, expand=2)
        src = b
        if not flat:
            dM = path.dM[k][:, None, None, :]
            src = src + geo.curvature_from(M, step, nv, dM, v2, v1)
        if not theta_zero:
            src = src + (theta_coefficient * path.dt[k]) * geo.theta_h_from(M, weight, step, nv, v2, v1)
        b = geo.apply_damping_exp(step, nv, path.dt[k], src)
        if keep:
            W2[k + 1] = b
    trace.W2_horizon = horizon
    trace.cum_W2dM = cum
    trace.W2 = W2
    trace.theta_coefficient = theta_coefficient
    return trace


def ito_integral(path: PathRecord, a: int, b: int, weights: np.ndarray, increments: str = "dM") -> np.ndarray:
    """Left-point sum over steps k in [a, b) of <increment_k, weights_k>.

    ``weights`` has shape (b - a, B, n) in frame coordinates.  ``increments``
    selects the stored martingale increments ("dM", default) or the raw
    Gaussian increments ("dB").  A pinning step carries no Gaussian increment.
    """
    if not 0 <= a <= b <= path.steps:
        raise ValueError("integration window outside the path grid")
    inc = getattr(path, increments)[a:b]
    if weights.shape != inc.shape:
        raise ValueError(f"weights must have shape {inc.shape}")
    return np.einsum("kbd,kbd->b", inc, weights)
