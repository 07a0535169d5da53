"""Discretized h-Brownian motions and semi-classical bridges with frames.

Both samplers are geodesic random walks: each step moves along
``exp_x(u (dB + drift * dt))`` and parallel transports the frame ``u``.  All
per-step data is stored in frame coordinates so that stochastic integrals
against the martingale part become plain sums ``sum_k <dM_k, weight_k>``.

Paths are processed in batches; a ``PathRecord`` holds a whole batch with the
path axis second (after the time axis).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from fkhess import geometry as geo
from fkhess.rng import gaussian_increments

# Space-form transport is exact up to rounding; re-orthonormalize periodically.
SPACE_FORM_REORTHO_EVERY = 64


@dataclass
class BridgeSpec:
    """Schedule of a semi-classical bridge to the pole.

    ``steps`` uniform steps of size ``T/steps`` are taken while the remaining
    time allows it; afterwards steps shrink to ``shrink * remaining``.  Once
    the remaining time drops below ``pin_fraction * T/steps`` the path is
    pinned to the pole by one deterministic geodesic step.
    """

    T: float
    steps: int
    shrink: float = 0.5
    pin_fraction: float = 1e-3

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("bridge horizon T must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink factor must lie in (0, 1)")
        if not 0.0 < self.pin_fraction < 1.0:
            raise ValueError("pinning threshold must be below the base step")

    @property
    def base_step(self) -> float:
        return self.T / self.steps

    @property
    def pin_threshold(self) -> float:
        return self.pin_fraction * self.base_step

    def schedule(self) -> np.ndarray:
        """Step sizes of the random-walk part, excluding the pinning step.

        The first ``steps - 1`` steps are exactly uniform, so grid times
        ``k * T/steps`` for ``k < steps`` are hit exactly.
        """
        delta = self.base_step
        dts = [delta] * (self.steps - 1)
        t = (self.steps - 1) * delta
        while True:
            remaining = self.T - t
            if remaining < self.pin_threshold:
                break
            dt = min(delta, self.shrink * remaining)
            dts.append(dt)
            t += dt
        return np.asarray(dts)


@dataclass
class PathRecord:
    """A batch of discretized paths.

    Shapes use ``S`` for the number of random-walk steps (plus one pinning
    step for pinned bridges), ``B`` for the batch size, ``D`` for the ambient
    dimension.

    times: (S+1,) grid; dt: (S,)
    points: (S+1, B, D); r: (S+1, B) distance to the pole
    nv: (S+1, B, n) frame coordinates of the unit radial field
    dB: (S, B, n) the sampled Gaussian increments (zero on a pinning step)
    drift: (S, B, n) drift per unit time in frame coordinates
    dM: (S, B, n) increments of the martingale part of the h-Brownian motion
        along this path (equal to dB for the h-Brownian motion itself)
    frames: final frames (B, n, D), or all frames (S+1, B, n, D) if kept
    """

    scheme: str
    times: np.ndarray
    dt: np.ndarray
    points: np.ndarray
    r: np.ndarray
    nv: np.ndarray
    dB: np.ndarray
    drift: np.ndarray
    dM: np.ndarray
    frames: np.ndarray
    frame0: np.ndarray
    index: np.ndarray
    seed: int
    pinned: bool = False
    all_frames: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.dt)

    @property
    def batch(self) -> int:
        return len(self.index)

    def step_index(self, t: float, atol: float = 1e-12) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > atol * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the path grid")
        return k


def _initial_frame(M, x0, frame0):
    if frame0 is None:
        frame0 = geo.adapted_frame(M, x0)
    frame0 = np.asarray(frame0, dtype=float)
    gram = geo.inner(M, frame0[:, None, :], frame0[None, :, :])
    if not np.allclose(gram, np.eye(M.n), atol=1e-10):
        raise geo.GeometryError("initial frame is not orthonormal")
    return frame0


def _walk(M, weight, x0, frame0, dts, seed, index, keep_frames, drift_fn, pin, scheme, meta):
    """Shared random-walk loop.

    ``drift_fn(k, r, nv)`` returns the drift per unit time in frame coordinates
    at step ``k``.  ``pin`` requests a final deterministic step to the pole.
    """
    geo.check_point(M, x0)
    index = np.asarray(index, dtype=np.int64)
    B = len(index)
    n, D = M.n, M.ambient_dim
    S_rw = len(dts)
    S = S_rw + (1 if pin else 0)
    Z = gaussian_increments(seed, index, S_rw, n)
    x = np.broadcast_to(np.asarray(x0, float), (B, D)).copy()
    u = np.broadcast_to(frame0, (B, n, D)).copy()
    points = np.empty((S + 1, B, D))
    r_all = np.empty((S + 1, B))
    nv_all = np.empty((S + 1, B, n))
    dB = np.zeros((S, B, n))
    drift = np.zeros((S, B, n))
    dM = np.zeros((S, B, n))
    frames = np.empty((S + 1, B, n, D)) if keep_frames else None
    reortho = 1 if M.kind == "warped" else SPACE_FORM_REORTHO_EVERY
    h_active = weight is not None and not weight.is_zero
    dt_all = np.concatenate([dts, [0.0]]) if pin else np.asarray(dts, float)

    def record(k, x, u):
        r, N = geo.radial_field(M, x)
        points[k] = x
        r_all[k] = r
        nv_all[k] = geo.to_frame(M, u, N)
        if keep_frames:
            frames[k] = u

    record(0, x, u)
    t = 0.0
    for k in range(S):
        r_k, nv_k = r_all[k], nv_all[k]
        grad_h = weight.d1(r_k)[:, None] * nv_k if h_active else 0.0
        if pin and k == S_rw:
            dt = meta["T"] - t
            dt_all[k] = dt
            step = -r_k[:, None] * nv_k
            drift[k] = step / dt
            dM[k] = step - grad_h * dt
        else:
            dt = dts[k]
            dB[k] = np.sqrt(dt) * Z[k]
            drift[k] = drift_fn(k, t, r_k, nv_k)
            step = dB[k] + drift[k] * dt
            dM[k] = step - grad_h * dt
        try:
            x, u = geo.exp_and_transport(M, x, u, geo.from_frame(u, step))
        except geo.GeometryError as exc:
            raise geo.GeometryError(f"step {k}: {exc}") from exc
        x = geo.normalize_point(M, x)
        if pin and k == S_rw:
            x = np.broadcast_to(M.pole, x.shape).copy()
        if (k + 1) % reortho == 0 or k == S - 1:
            u = geo.orthonormalize(M, x, u)
        t += dt
        record(k + 1, x, u)
    times = np.concatenate([[0.0], np.cumsum(dt_all)])
    if pin:
        times[-1] = meta["T"]
    return PathRecord(
        scheme=scheme,
        times=times,
        dt=dt_all,
        points=points,
        r=r_all,
        nv=nv_all,
        dB=dB,
        drift=drift,
        dM=dM,
        frames=frames if keep_frames else u,
        frame0=frame0,
        index=index,
        seed=int(seed),
        pinned=pin,
        all_frames=keep_frames,
        meta=meta,
    )


def sample_h_bm(
    M: geo.ModelManifold,
    weight: geo.RadialWeight | None,
    x0,
    t_end: float,
    steps: int,
    seed: int,
    index,
    frame0=None,
    keep_frames: bool = False,
) -> PathRecord:
    """Geodesic random walk for the diffusion generated by 1/2 Laplacian + grad h."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    weight = geo.ZeroWeight() if weight is None else weight
    if not weight.is_zero:
        geo.require_pole(M)
    frame0 = _initial_frame(M, x0, frame0)
    dts = np.full(steps, t_end / steps)

    def drift_fn(k, t, r, nv):
        if weight.is_zero:
            return np.zeros_like(nv)
        return weight.d1(r)[:, None] * nv

    meta = {"t_end": float(t_end), "steps": int(steps)}
    return _walk(M, weight, x0, frame0, dts, seed, index, keep_frames, drift_fn, False, "h-bm", meta)


def sample_sc_bridge(
    M: geo.ModelManifold,
    spec: BridgeSpec,
    x0,
    seed: int,
    index,
    weight: geo.RadialWeight | None = None,
    frame0=None,
    keep_frames: bool = False,
) -> PathRecord:
    """Semi-classical bridge from ``x0`` to the pole over ``[0, spec.T]``.

    The drift is ``grad log k_{T-t}``; the weight only enters the stored
    martingale increments ``dM = dx - grad h dt``, which are the increments of
    the h-Brownian martingale part under the equivalent change of measure.
    """
    geo.require_pole(M)
    weight = geo.ZeroWeight() if weight is None else weight
    frame0 = _initial_frame(M, x0, frame0)
    dts = spec.schedule()
    starts = np.concatenate([[0.0], np.cumsum(dts)[:-1]])

    def drift_fn(k, t, r, nv):
        tau = spec.T - starts[k]
        return geo.grad_log_k_radial(M, tau, r)[:, None] * nv

    meta = {"T": float(spec.T), "steps": int(spec.steps), "shrink": spec.shrink, "pin_fraction": spec.pin_fraction}
    return _walk(M, weight, x0, frame0, dts, seed, index, keep_frames, drift_fn, True, "sc-bridge", meta)


def trapezoid_prefix(values: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """Running trapezoid integral over the time axis (axis 0); starts at zero."""
    inc = 0.5 * (values[1:] + values[:-1]) * dt.reshape((-1,) + (1,) * (values.ndim - 1))
    out = np.zeros_like(values)
    out[1:] = np.cumsum(inc, axis=0)
    return out


def phi_h_along(M: geo.ModelManifold, weight: geo.RadialWeight, path: PathRecord) -> np.ndarray:
    return geo.phi_h_radial(M, weight, path.r)


def girsanov_weight(M: geo.ModelManifold, weight: geo.RadialWeight | None, path: PathRecord, t: float) -> np.ndarray:
    """Density of the h-Brownian motion law against the bridge law up to time t.

    M_t = exp(h(x_t) - h(x_0)) k_T(x_0) / k_{T-t}(x_t) exp(int_0^t Phi^h).
    """
    if path.scheme != "sc-bridge":
        raise ValueError("girsanov weight is defined for bridge paths")
    weight = geo.ZeroWeight() if weight is None else weight
    T = path.meta["T"]
    pin = path.meta["pin_fraction"] * T / path.meta["steps"]
    if t > T - pin:
        raise ValueError("the weight is singular at the pinning time; choose t < T - pin threshold")
    k = path.step_index(t)
    phi = phi_h_along(M, weight, path)
    integral = trapezoid_prefix(phi[: k + 1], path.dt[:k])[-1]
    r0, rt = path.r[0], path.r[k]
    log_ratio = geo.log_k(M, T, r0) - geo.log_k(M, T - path.times[k], rt)
    dh = weight.eta(rt) - weight.eta(r0)
    return np.exp(dh + log_ratio + integral)


def dump_paths(path: PathRecord, filename: str, limit: int) -> None:
    """Write a CSV trace: path index, step, time, point coordinates, dB."""
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        D = path.points.shape[-1]
        n = path.dB.shape[-1]
        w.writerow(["path", "step", "t"] + [f"x{i}" for i in range(D)] + [f"dB{i}" for i in range(n)])
        for b in range(min(limit, path.batch)):
            for k in range(path.steps + 1):
                db = path.dB[k, b] if k < path.steps else np.zeros(n)
                w.writerow(
                    [int(path.index[b]), k, repr(float(path.times[k]))]
                    + [repr(float(v)) for v in path.points[k, b]]
                    + [repr(float(v)) for v in db]
                )
