"""Differential geometry of rotationally symmetric model manifolds.

Every manifold here is a metric ``dr^2 + f(r)^2 g_sphere`` around a distinguished
point (the pole for euclidean, hyperbolic and warped kinds; a base point for the
sphere).  Curvature, Ricci, the cyclic tensor built from ``nabla Ric`` and the
weight-dependent tensors are all expressed through the radial profile, which
makes them closed form once ``f`` and its first three derivatives are known.

Two layers are exposed:

* a batched *frame-coordinate* layer used by the samplers: tensors act on
  vectors written in an orthonormal frame, and the only geometric input is the
  distance ``r`` to the pole and the frame coordinates of the unit radial field;
* a point-level layer taking ambient coordinates (hyperboloid, embedded sphere,
  normal coordinates for warped products), used by the oracles and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Below this radius removable singularities are evaluated by Taylor series.
# The series carry enough terms that truncation stays below 1e-12 here, while
# the direct formulas lose at most ~1e-10 to cancellation just above it.
SMALL_R = 1e-3
# The Hamiltonian coefficients of the warped geodesic flow lose more digits
# to cancellation, so they switch to series earlier.
HAMILTON_SERIES_R = 1e-2


class GeometryError(RuntimeError):
    """Raised when a geometric primitive cannot be evaluated reliably."""


# ---------------------------------------------------------------------------
# warping profiles
# ---------------------------------------------------------------------------


class WarpingProfile:
    """Radial profile ``f`` of a rotationally symmetric metric.

    Subclasses provide ``f`` and three derivatives, plus the odd Taylor
    coefficients ``f(r) = r (1 + c3 r^2 + c5 r^4 + c7 r^6 + ...)`` used near the
    pole.  ``f(0)=0`` and ``f'(0)=1`` are required for a smooth metric.
    """

    name = "profile"
    taylor: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def f(self, r):
        raise NotImplementedError

    def df(self, r):
        raise NotImplementedError

    def d2f(self, r):
        raise NotImplementedError

    def d3f(self, r):
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and self.__dict__ == other.__dict__

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.__dict__.items()))))

    def __repr__(self):
        return f"{type(self).__name__}({self.__dict__})"


class FlatProfile(WarpingProfile):
    name = "flat"
    taylor = (0.0, 0.0, 0.0)

    def f(self, r):
        return np.asarray(r, dtype=float)

    def df(self, r):
        return np.ones_like(np.asarray(r, dtype=float))

    def d2f(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def d3f(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))


class SinhProfile(WarpingProfile):
    name = "sinh"
    taylor = (1.0 / 6.0, 1.0 / 120.0, 1.0 / 5040.0)

    def f(self, r):
        return np.sinh(r)

    def df(self, r):
        return np.cosh(r)

    def d2f(self, r):
        return np.sinh(r)

    def d3f(self, r):
        return np.cosh(r)


class SinProfile(WarpingProfile):
    name = "sin"
    taylor = (-1.0 / 6.0, 1.0 / 120.0, -1.0 / 5040.0)

    def f(self, r):
        return np.sin(r)

    def df(self, r):
        return np.cos(r)

    def d2f(self, r):
        return -np.sin(r)

    def d3f(self, r):
        return -np.cos(r)


class CubicProfile(WarpingProfile):
    """``f(r) = r + c r^3``; positive ``c`` keeps the origin a pole."""

    name = "cubic"

    def __init__(self, c: float = 0.1):
        self.c = float(c)

    @property
    def taylor(self):
        return (self.c, 0.0, 0.0)

    def f(self, r):
        r = np.asarray(r, dtype=float)
        return r + self.c * r**3

    def df(self, r):
        r = np.asarray(r, dtype=float)
        return 1.0 + 3.0 * self.c * r**2

    def d2f(self, r):
        return 6.0 * self.c * np.asarray(r, dtype=float)

    def d3f(self, r):
        return np.full_like(np.asarray(r, dtype=float), 6.0 * self.c)


# ---------------------------------------------------------------------------
# radial weights and potentials
# ---------------------------------------------------------------------------


class RadialWeight:
    """Weight ``h(x) = eta(d(x, pole))`` together with the lower bound ``K``.

    ``K`` is the declared constant with ``Ric - 2 Hess h >= -K``.  Besides the
    derivatives of ``eta`` a weight supplies ``eta'/r`` and
    ``(eta'' - eta'/r)/r``, both of which stay finite at the pole for smooth
    radial functions.
    """

    name = "weight"
    K: float = 0.0

    def eta(self, r):
        raise NotImplementedError

    def d1(self, r):
        raise NotImplementedError

    def d2(self, r):
        raise NotImplementedError

    def d3(self, r):
        raise NotImplementedError

    def d1_over_r(self, r):
        raise NotImplementedError

    def defect(self, r):
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False

    def __eq__(self, other):
        return type(self) is type(other) and self.__dict__ == other.__dict__

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.__dict__.items()))))

    def __repr__(self):
        return f"{type(self).__name__}({self.__dict__})"


class ZeroWeight(RadialWeight):
    name = "zero"

    def __init__(self, K: float = 0.0):
        self.K = float(K)

    def eta(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    d1 = d2 = d3 = d1_over_r = defect = eta

    @property
    def is_zero(self) -> bool:
        return True


class QuadraticWeight(RadialWeight):
    """``eta(r) = c r^2``."""

    name = "quadratic"

    def __init__(self, c: float, K: float = 0.0):
        self.c = float(c)
        self.K = float(K)

    def eta(self, r):
        return self.c * np.asarray(r, dtype=float) ** 2

    def d1(self, r):
        return 2.0 * self.c * np.asarray(r, dtype=float)

    def d2(self, r):
        return np.full_like(np.asarray(r, dtype=float), 2.0 * self.c)

    def d3(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def d1_over_r(self, r):
        return self.d2(r)

    def defect(self, r):
        return self.d3(r)


class LogCoshWeight(RadialWeight):
    """``eta(r) = s log cosh r``: bounded Hessian, non-vanishing third derivative."""

    name = "logcosh"

    def __init__(self, s: float = 1.0, K: float = 0.0):
        self.s = float(s)
        self.K = float(K)

    def eta(self, r):
        r = np.asarray(r, dtype=float)
        return self.s * (np.logaddexp(r, -r) - math.log(2.0))

    def d1(self, r):
        return self.s * np.tanh(r)

    def d2(self, r):
        return self.s / np.cosh(r) ** 2

    def d3(self, r):
        r = np.asarray(r, dtype=float)
        return -2.0 * self.s * np.tanh(r) / np.cosh(r) ** 2

    def d1_over_r(self, r):
        r = np.asarray(r, dtype=float)
        small = np.abs(r) < 1e-3
        rs = np.where(small, 1.0, r)
        series = 1.0 - r**2 / 3.0 + 2.0 * r**4 / 15.0
        return self.s * np.where(small, series, np.tanh(rs) / rs)

    def defect(self, r):
        r = np.asarray(r, dtype=float)
        small = np.abs(r) < 1e-3
        rs = np.where(small, 1.0, r)
        direct = (1.0 / np.cosh(rs) ** 2 - np.tanh(rs) / rs) / rs
        series = -2.0 * r / 3.0 + 8.0 * r**3 / 15.0
        return self.s * np.where(small, series, direct)


class Potential:
    """Bounded potential ``V``; evaluated on batches of ambient points."""

    name = "potential"
    sup_norm: float = 0.0

    def __call__(self, M: "ModelManifold", x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and self.__dict__ == other.__dict__

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.__dict__.items()))))

    def __repr__(self):
        return f"{type(self).__name__}({self.__dict__})"


class ConstantPotential(Potential):
    name = "constant"

    def __init__(self, value: float):
        self.value = float(value)
        self.sup_norm = abs(self.value)

    def __call__(self, M, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.value)


class ClippedDistancePotential(Potential):
    """``V(x) = min(d(x, pole)^2, cap)``; Lipschitz, hence locally Hoelder."""

    name = "clipped-distance"

    def __init__(self, cap: float = 10.0):
        self.cap = float(cap)
        self.sup_norm = self.cap

    def __call__(self, M, x):
        r = pole_distance(M, x)
        return np.minimum(r**2, self.cap)


# ---------------------------------------------------------------------------
# the manifold
# ---------------------------------------------------------------------------

KINDS = ("euclidean", "hyperbolic", "sphere", "warped")


@dataclass(frozen=True, eq=False)
class ModelManifold:
    """A rotationally symmetric model manifold.

    ``kind`` selects the coordinate realization: points of euclidean and warped
    manifolds are vectors in R^n (normal coordinates at the pole for warped),
    hyperbolic points live on the upper hyperboloid in R^{n+1} with the
    Minkowski form, sphere points are unit vectors in R^{n+1}.  Tangent vectors
    are ambient vectors; for warped manifolds a tangent vector at ``y`` is
    written in the orthonormal identification that sends the ambient radial
    direction to ``d/dr`` and ambient directions orthogonal to ``y`` to unit
    tangential vectors.
    """

    kind: str
    n: int
    profile: WarpingProfile
    kappa: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown manifold kind {self.kind!r}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError("dimension n must be an integer >= 2")

    @property
    def ambient_dim(self) -> int:
        return self.n + 1 if self.kind in ("hyperbolic", "sphere") else self.n

    @property
    def has_pole(self) -> bool:
        return self.kind != "sphere"

    @property
    def is_space_form(self) -> bool:
        return self.kappa is not None

    @property
    def pole(self) -> np.ndarray:
        p = np.zeros(self.ambient_dim)
        if self.kind in ("hyperbolic", "sphere"):
            p[0] = 1.0
        return p

    def __eq__(self, other):
        return (
            isinstance(other, ModelManifold)
            and self.kind == other.kind
            and self.n == other.n
            and self.profile == other.profile
            and self.kappa == other.kappa
        )

    def __hash__(self):
        return hash((self.kind, self.n, self.profile, self.kappa))


def euclidean(n: int) -> ModelManifold:
    return ModelManifold("euclidean", n, FlatProfile(), 0.0)


def hyperbolic(n: int) -> ModelManifold:
    return ModelManifold("hyperbolic", n, SinhProfile(), -1.0)


def sphere(n: int) -> ModelManifold:
    return ModelManifold("sphere", n, SinProfile(), 1.0)


def warped(n: int, profile: WarpingProfile) -> ModelManifold:
    return ModelManifold("warped", n, profile, None)


def require_pole(M: ModelManifold) -> None:
    if not M.has_pole:
        raise GeometryError("operation needs a pole; the sphere has a cut locus")


# ---------------------------------------------------------------------------
# ambient point and vector operations (batched over leading axes)
# ---------------------------------------------------------------------------


def inner(M: ModelManifold, u, v) -> np.ndarray:
    """Riemannian inner product of ambient tangent vectors (last axis)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if M.kind == "hyperbolic":
        return np.einsum("...i,...i->...", u[..., 1:], v[..., 1:]) - u[..., 0] * v[..., 0]
    return np.einsum("...i,...i->...", u, v)


def norm(M: ModelManifold, v) -> np.ndarray:
    return np.sqrt(np.maximum(inner(M, v, v), 0.0))


def project_tangent(M: ModelManifold, x, v) -> np.ndarray:
    """Orthogonal projection of an ambient vector onto ``T_x M``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if M.kind == "hyperbolic":
        return v + inner(M, v, x)[..., None] * x
    if M.kind == "sphere":
        return v - inner(M, v, x)[..., None] * x
    return v


def normalize_point(M: ModelManifold, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if M.kind == "hyperbolic":
        return x / np.sqrt(-inner(M, x, x))[..., None]
    if M.kind == "sphere":
        return x / np.linalg.norm(x, axis=-1, keepdims=True)
    return x


def check_point(M: ModelManifold, x, tol: float = 1e-10) -> None:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != M.ambient_dim:
        raise GeometryError(
            f"point has {x.shape[-1]} coordinates, {M.kind} n={M.n} needs {M.ambient_dim}"
        )
    if M.kind == "hyperbolic":
        err = np.abs(inner(M, x, x) + 1.0)
        if np.any(err > tol) or np.any(x[..., 0] <= 0):
            raise GeometryError("point is not on the upper hyperboloid")
    elif M.kind == "sphere":
        if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > tol):
            raise GeometryError("point is not on the unit sphere")


def _sinhc(s):
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-4
    ss = np.where(small, 1.0, s)
    return np.where(small, 1.0 + s**2 / 6.0 + s**4 / 120.0, np.sinh(ss) / ss)


def _coshm(s):
    """(cosh s - 1)/s^2"""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-3
    ss = np.where(small, 1.0, s)
    return np.where(small, 0.5 + s**2 / 24.0 + s**4 / 720.0, (np.cosh(ss) - 1.0) / ss**2)


def _sinc(s):
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-4
    ss = np.where(small, 1.0, s)
    return np.where(small, 1.0 - s**2 / 6.0 + s**4 / 120.0, np.sin(ss) / ss)


def _cosm(s):
    """(cos s - 1)/s^2"""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-3
    ss = np.where(small, 1.0, s)
    return np.where(small, -0.5 + s**2 / 24.0 - s**4 / 720.0, (np.cos(ss) - 1.0) / ss**2)


def pole_distance(M: ModelManifold, x) -> np.ndarray:
    """Distance from ``x`` to the pole (or the base point of the sphere)."""
    if M.kind == "warped":
        return np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    return distance(M, x, M.pole)


def distance(M: ModelManifold, x, y) -> np.ndarray:
    """Geodesic distance, computed from chordal quantities for accuracy."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != M.ambient_dim or y.shape[-1] != M.ambient_dim:
        raise GeometryError("point dimension does not match the manifold")
    if M.kind == "euclidean":
        return np.linalg.norm(x - y, axis=-1)
    if M.kind == "hyperbolic":
        dx = x - y
        chord2 = np.maximum(inner(M, dx, dx), 0.0)
        return 2.0 * np.arcsinh(np.sqrt(chord2) / 2.0)
    if M.kind == "sphere":
        chord = np.linalg.norm(x - y, axis=-1)
        return 2.0 * np.arcsin(np.minimum(chord / 2.0, 1.0))
    return _warped_distance(M, x, y)


def radial_field(M: ModelManifold, x) -> tuple[np.ndarray, np.ndarray]:
    """Distance ``r`` to the pole and the unit radial vector ``grad r`` at ``x``.

    At the pole the radial vector is returned as zero; every tensor built from
    it has a coefficient that vanishes there.
    """
    x = np.asarray(x, dtype=float)
    p = M.pole
    r = pole_distance(M, x)
    if M.kind in ("euclidean", "warped"):
        v = x - p
    else:
        # tangent projection of (pole - x), written to avoid cancellation
        d = p - x
        v = -project_tangent(M, x, d)
    nv = norm(M, v)
    safe = np.where(nv > 0, nv, 1.0)
    N = np.where((nv > 0)[..., None], v / safe[..., None], 0.0)
    return r, N


def point_at(M: ModelManifold, r: float, direction=None) -> np.ndarray:
    """The point at distance ``r`` from the pole along a unit direction of R^n."""
    if direction is None:
        direction = np.eye(M.n)[0]
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    if M.kind in ("euclidean", "warped"):
        return r * direction
    c, s = (np.cosh(r), np.sinh(r)) if M.kind == "hyperbolic" else (np.cos(r), np.sin(r))
    return np.concatenate([[c], s * direction])


def orthonormalize(M: ModelManifold, x, u) -> np.ndarray:
    """Modified Gram-Schmidt of the frame ``u[..., i, :]`` in ``T_x M``."""
    x = np.asarray(x, dtype=float)
    u = np.array(u, dtype=float, copy=True)
    u = project_tangent(M, x[..., None, :], u)
    k = u.shape[-2]
    for i in range(k):
        ui = u[..., i, :]
        for j in range(i):
            uj = u[..., j, :]
            ui = ui - inner(M, ui, uj)[..., None] * uj
        nrm = norm(M, ui)
        if np.any(nrm < 1e-12):
            raise GeometryError("frame degenerated during re-orthonormalization")
        u[..., i, :] = ui / nrm[..., None]
    return u


def adapted_frame(M: ModelManifold, x) -> np.ndarray:
    """Orthonormal frame at ``x`` whose first vector is the outward radial field.

    At the pole the frame is the coordinate frame.  For the sphere the radial
    field refers to the base point.
    """
    x = np.asarray(x, dtype=float)
    r, N = radial_field(M, x)
    D = M.ambient_dim
    basis = np.eye(D)[D - M.n :]
    cands = np.broadcast_to(basis, x.shape[:-1] + basis.shape).copy()
    if np.ndim(r) == 0:
        if r > 0:
            cands = np.concatenate([N[None, :], cands], axis=0)
    else:
        if np.any(r > 0):
            cands = np.concatenate([N[..., None, :], cands], axis=-2)
            # rows at the pole get a harmless duplicate; drop it by using the basis
            cands[r == 0, 0, :] = basis[0]
    frame = []
    proj = project_tangent(M, x[..., None, :], cands)
    for i in range(proj.shape[-2]):
        v = proj[..., i, :]
        for f in frame:
            v = v - inner(M, v, f)[..., None] * f
        nv = norm(M, v)
        if np.all(nv > 1e-8):
            frame.append(v / nv[..., None])
        if len(frame) == M.n:
            break
    if len(frame) < M.n:
        raise GeometryError("could not complete an orthonormal frame")
    return np.stack(frame, axis=-2)


def from_frame(u, c) -> np.ndarray:
    """Ambient vector with frame coordinates ``c``."""
    return np.einsum("...i,...id->...d", np.asarray(c, dtype=float), u)


def to_frame(M: ModelManifold, u, v) -> np.ndarray:
    """Frame coordinates of an ambient tangent vector."""
    return inner(M, u, np.asarray(v, dtype=float)[..., None, :])


def exp_and_transport(M: ModelManifold, x, u, w):
    """One geodesic step ``exp_x(w)`` with parallel transport of the vectors ``u``.

    ``x`` has shape (..., D), ``u`` (..., k, D), ``w`` (..., D).  Returns the new
    point and the transported vectors.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if M.kind == "euclidean":
        return x + w, u.copy()
    if M.kind in ("hyperbolic", "sphere"):
        s = norm(M, w)
        cw = inner(M, u, w[..., None, :])  # (..., k)
        if M.kind == "hyperbolic":
            a, b = np.cosh(s), _sinhc(s)
            c = _coshm(s)
            x1 = a[..., None] * x + b[..., None] * w
            u1 = u + cw[..., None] * (c[..., None, None] * w[..., None, :] + b[..., None, None] * x[..., None, :])
        else:
            a, b = np.cos(s), _sinc(s)
            c = _cosm(s)
            x1 = a[..., None] * x + b[..., None] * w
            u1 = u + cw[..., None] * (c[..., None, None] * w[..., None, :] - b[..., None, None] * x[..., None, :])
        return x1, u1
    return _warped_exp_and_transport(M, x, u, w)


def log_to_pole(M: ModelManifold, x) -> np.ndarray:
    """The tangent vector at ``x`` whose geodesic reaches the pole at unit time."""
    require_pole(M)
    r, N = radial_field(M, x)
    return -np.asarray(r)[..., None] * N


# ---------------------------------------------------------------------------
# radial scalar functions of the profile
# ---------------------------------------------------------------------------


class RadialScalars(NamedTuple):
    """Profile-derived scalars at radius r.

    ``lp``/``lpp`` are the first two derivatives of ``log(f(r)/r)``; ``lp_r``
    is ``lp / r``.  ``K_rad``/``K_tan`` are the sectional curvatures of planes
    containing / orthogonal to the radial direction, ``mu = K_rad - K_tan``.
    """

    f_over_r: np.ndarray
    lp: np.ndarray
    lpp: np.ndarray
    lp_r: np.ndarray
    K_rad: np.ndarray
    K_tan: np.ndarray
    mu: np.ndarray
    mu_r: np.ndarray
    dK_rad: np.ndarray
    dK_tan: np.ndarray


def _log_series(profile: WarpingProfile):
    c3, c5, c7 = profile.taylor
    L2 = c3
    L4 = c5 - c3**2 / 2.0
    L6 = c7 - c3 * c5 + c3**3 / 3.0
    return L2, L4, L6


def log_ratio_slope(M: ModelManifold, r) -> np.ndarray:
    """d/dr log(f(r)/r), the only profile quantity the bridge drift needs."""
    r = np.asarray(r, dtype=float)
    if M.kind == "euclidean":
        return np.zeros_like(r)
    L2, L4, L6 = _log_series(M.profile)
    small = r < SMALL_R
    rs = np.where(small, 1.0, r)
    direct = M.profile.df(rs) / M.profile.f(rs) - 1.0 / rs
    return np.where(small, 2 * L2 * r + 4 * L4 * r**3 + 6 * L6 * r**5, direct)


def radial_scalars(M: ModelManifold, r) -> RadialScalars:
    r = np.asarray(r, dtype=float)
    z = np.zeros_like(r)
    if M.kind == "euclidean":
        one = np.ones_like(r)
        return RadialScalars(one, z, z, z, z, z, z, z, z, z)
    prof = M.profile
    a, b, c = prof.taylor
    L2, L4, L6 = _log_series(prof)
    small = r < SMALL_R
    rs = np.where(small, 1.0, r)
    f, df, d2f, d3f = prof.f(rs), prof.df(rs), prof.d2f(rs), prof.d3f(rs)
    r2 = r**2
    f_over_r = np.where(small, 1.0 + a * r2 + b * r2**2 + c * r2**3, f / rs)
    lp = np.where(small, 2 * L2 * r + 4 * L4 * r**3 + 6 * L6 * r**5, df / f - 1.0 / rs)
    lpp = np.where(
        small,
        2 * L2 + 12 * L4 * r2 + 30 * L6 * r2**2,
        (d2f * f - df**2) / f**2 + 1.0 / rs**2,
    )
    lp_r = np.where(small, 2 * L2 + 4 * L4 * r2 + 6 * L6 * r2**2, (df / f - 1.0 / rs) / rs)
    if M.is_space_form:
        k = np.full_like(r, float(M.kappa))
        return RadialScalars(f_over_r, lp, lpp, lp_r, k, k, z, z, z, z)
    # series coefficients of K_rad = -f''/f and K_tan = (1 - f'^2)/f^2
    kr0, kr2, kr4 = -6 * a, 6 * a**2 - 20 * b, -(42 * c - 26 * a * b + 6 * a**3)
    kt0, kt2, kt4 = -6 * a, 3 * a**2 - 10 * b, 2 * a * b - 14 * c
    K_rad = np.where(small, kr0 + kr2 * r2 + kr4 * r2**2, -d2f / f)
    K_tan = np.where(small, kt0 + kt2 * r2 + kt4 * r2**2, (1.0 - df**2) / f**2)
    mu2, mu4 = kr2 - kt2, kr4 - kt4
    mu = np.where(small, mu2 * r2 + mu4 * r2**2, K_rad - K_tan)
    mu_r = np.where(small, mu2 * r + mu4 * r**3, (K_rad - K_tan) / rs)
    dK_rad = np.where(small, 2 * kr2 * r + 4 * kr4 * r**3, -(d3f * f - d2f * df) / f**2)
    # d/dr K_tan = 2 (f'/f) (K_rad - K_tan)
    dK_tan = np.where(small, 2 * kt2 * r + 4 * kt4 * r**3, 2.0 * (df / f) * (K_rad - K_tan))
    return RadialScalars(f_over_r, lp, lpp, lp_r, K_rad, K_tan, mu, mu_r, dK_rad, dK_tan)


# ---------------------------------------------------------------------------
# frame-coordinate tensors
#
# ``r`` has shape S, ``nv`` (the radial unit vector in frame coordinates) has
# shape S + (n,).  Vector arguments broadcast against S + (n,) after inserting
# any extra axes; callers pass ``r``/``nv`` already expanded when needed.
# ---------------------------------------------------------------------------


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def ricci_coefficients(M: ModelManifold, rs: RadialScalars):
    """Ric = alpha N⊗N + gamma P with P = I - N⊗N, and the derivative data."""
    n = M.n
    alpha = (n - 1) * rs.K_rad
    gamma = (n - 2) * rs.K_tan + rs.K_rad
    dalpha = (n - 1) * rs.dK_rad
    dgamma = (n - 2) * rs.dK_tan + rs.dK_rad
    # (alpha - gamma) * f'/f = (n-2) mu (1/r + lp)
    coupling = (n - 2) * (rs.mu_r + rs.mu * rs.lp)
    return alpha, gamma, dalpha, dgamma, coupling


def hess_h_coefficients(w: RadialWeight, r, rs: RadialScalars):
    """Hess h = A N⊗N + B P, with A', B' and the coupling (A - B) f'/f."""
    d1, d2, d3 = w.d1(r), w.d2(r), w.d3(r)
    d1r, defect = w.d1_over_r(r), w.defect(r)
    A = d2
    B = d1r + d1 * rs.lp
    dA = d3
    dB = defect + d2 * rs.lp + d1 * rs.lpp
    # (A - B)(1/r + lp) with A - B = r*defect - d1*lp
    coupling = defect + r * defect * rs.lp - d1 * rs.lp_r - d1 * rs.lp**2
    return A, B, dA, dB, coupling


def _radial_operator_matrix(a, b, nv):
    """Matrix of a N⊗N + b P in frame coordinates, shape S + (n, n)."""
    n = nv.shape[-1]
    eye = np.eye(n)
    nn = nv[..., :, None] * nv[..., None, :]
    return np.asarray(b)[..., None, None] * eye + (np.asarray(a) - np.asarray(b))[..., None, None] * nn


def ricci_matrix(M: ModelManifold, r, nv) -> np.ndarray:
    rs = radial_scalars(M, r)
    alpha, gamma, *_ = ricci_coefficients(M, rs)
    return _radial_operator_matrix(alpha, gamma, nv)


def hess_h_matrix(M: ModelManifold, w: RadialWeight, r, nv) -> np.ndarray:
    if w.is_zero:
        return np.zeros(np.shape(nv) + (np.shape(nv)[-1],))
    rs = radial_scalars(M, r)
    A, B, *_ = hess_h_coefficients(w, r, rs)
    return _radial_operator_matrix(A, B, nv)


def damping_matrix(M: ModelManifold, w: RadialWeight, r, nv) -> np.ndarray:
    """Frame matrix of -1/2 Ric + Hess h, the generator of the damped transport."""
    out = -0.5 * ricci_matrix(M, r, nv)
    if not w.is_zero:
        out = out + hess_h_matrix(M, w, r, nv)
    return out


class TensorCoefficients(NamedTuple):
    """Radial coefficients of every tensor used along paths, at a batch of radii.

    Curvature: K_tan, mu.  Damping generator -1/2 Ric + Hess h = damp_rad N⊗N
    + damp_tan P.  Derivative data (dA, dB, coupling) of Ric in ``ricci_grad``
    and of Hess h in ``hess_grad``; ``grad_h`` is eta'(r).
    """

    K_tan: np.ndarray
    mu: np.ndarray
    damp_rad: np.ndarray
    damp_tan: np.ndarray
    ricci_grad: tuple
    hess_grad: tuple
    grad_h: np.ndarray

    def take(self, k, expand: int = 0) -> "TensorCoefficients":
        """Slice index ``k`` of every array and append ``expand`` unit axes."""

        def sl(a):
            a = np.asarray(a)[k]
            return a.reshape(a.shape + (1,) * expand)

        return TensorCoefficients(
            sl(self.K_tan),
            sl(self.mu),
            sl(self.damp_rad),
            sl(self.damp_tan),
            tuple(sl(a) for a in self.ricci_grad),
            tuple(sl(a) for a in self.hess_grad),
            sl(self.grad_h),
        )


def tensor_coefficients(M: ModelManifold, w: RadialWeight | None, r) -> TensorCoefficients:
    r = np.asarray(r, dtype=float)
    w = ZeroWeight() if w is None else w
    rs = radial_scalars(M, r)
    alpha, gamma, dalpha, dgamma, coupling = ricci_coefficients(M, rs)
    A, B, dA, dB, cH = hess_h_coefficients(w, r, rs)
    z = np.zeros_like(r)
    return TensorCoefficients(
        rs.K_tan,
        rs.mu,
        -0.5 * alpha + A + z,
        -0.5 * gamma + B + z,
        (dalpha + z, dgamma + z, coupling + z),
        (dA + z, dB + z, cH + z),
        w.d1(r) + z,
    )


def curvature_from(M: ModelManifold, tc: TensorCoefficients, nv, X, Y, Z) -> np.ndarray:
    """R(X, Y)Z from precomputed coefficients (arrays broadcast against vectors[..., 0])."""
    if M.kind == "euclidean":
        return np.zeros(np.broadcast_shapes(np.shape(X), np.shape(Y), np.shape(Z)))
    kt = np.asarray(tc.K_tan)[..., None]
    yz, xz = _dot(Y, Z), _dot(X, Z)
    out = kt * (yz[..., None] * X - xz[..., None] * Y)
    if M.is_space_form:
        return out
    mu = np.asarray(tc.mu)[..., None]
    nX, nY, nZ = _dot(nv, X), _dot(nv, Y), _dot(nv, Z)
    extra = (nX * yz - xz * nY)[..., None] * nv + (nY * nZ)[..., None] * X - (nX * nZ)[..., None] * Y
    return out + mu * extra


def theta_h_from(M: ModelManifold, w: RadialWeight, tc: TensorCoefficients, nv, v2, v1) -> np.ndarray:
    """Theta^h(v2)(v1) from precomputed coefficients."""
    shape = np.broadcast_shapes(np.shape(v1), np.shape(v2), np.shape(nv))
    out = np.zeros(shape)
    if not M.is_space_form:
        coef = tc.ricci_grad
        out = out + 0.5 * (
            _radial_derivative_vector(True, coef, nv, None, v1, v2)
            - _radial_derivative_vector(False, coef, nv, v1, v2)
            - _radial_derivative_vector(False, coef, nv, v2, v1)
        )
    if w is None or w.is_zero:
        return out
    out = out + _radial_derivative_vector(False, tc.hess_grad, nv, v2, v1)
    grad_h = np.asarray(tc.grad_h)[..., None] * nv
    return out + curvature_from(M, tc, nv, grad_h, v2, v1)


def apply_damping_exp(tc: TensorCoefficients, nv, dt, vecs) -> np.ndarray:
    """exp(dt G) applied to vectors, G = damp_rad N⊗N + damp_tan P (closed form)."""
    et = np.exp(dt * np.asarray(tc.damp_tan))[..., None]
    er = np.exp(dt * np.asarray(tc.damp_rad))[..., None]
    return et * vecs + (er - et) * _dot(nv, vecs)[..., None] * nv


def curvature_apply(M: ModelManifold, r, nv, X, Y, Z) -> np.ndarray:
    """R(X, Y)Z with the convention R(X,Y)Z = nabla_X nabla_Y Z - nabla_Y nabla_X Z - nabla_[X,Y] Z."""
    X, Y, Z = (np.asarray(a, dtype=float) for a in (X, Y, Z))
    return curvature_from(M, tensor_coefficients(M, None, r), np.asarray(nv, float), X, Y, Z)


def _radial_derivative_vector(a_slot: bool, coef, nv, a, u, v=None):
    """Vector forms of the covariant derivative of a radial tensor.

    With T = A N⊗N + B P and coefficients ``coef = (dA, dB, c)`` where
    c = (A - B) f'/f:

    * a_slot=False: returns (nabla_a T) u as a vector;
    * a_slot=True:  returns the gradient in ``a`` of <(nabla_a T) u, v>.
    """
    dA, dB, c = (np.asarray(x)[..., None] for x in coef)
    nu = _dot(nv, u)[..., None]
    Pu = u - nu * nv
    if a_slot:
        nvv = _dot(nv, v)[..., None]
        Pv = v - nvv * nv
        return dA * nu * nvv * nv + dB * _dot(Pu, v)[..., None] * nv + c * (nvv * Pu + nu * Pv)
    na = _dot(nv, a)[..., None]
    Pa = a - na * nv
    return dA * na * nu * nv + dB * na * Pu + c * (_dot(Pa, u)[..., None] * nv + nu * Pa)


def theta_apply(M: ModelManifold, r, nv, v2, v1) -> np.ndarray:
    """The cyclic tensor built from nabla Ric, evaluated as the vector Theta(v2)(v1).

    <Theta(v2)(v1), v3> = (nabla_{v3} Ric)(v1, v2) - (nabla_{v1} Ric)(v3, v2)
                          - (nabla_{v2} Ric)(v1, v3).
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    return 2.0 * theta_h_from(M, None, tensor_coefficients(M, None, r), np.asarray(nv, float), v2, v1)


def grad_hess_h_apply(M: ModelManifold, w: RadialWeight, r, nv, a, b) -> np.ndarray:
    """(nabla_a Hess h) b, i.e. nabla^2(grad h)(a, b)."""
    tc = tensor_coefficients(M, w, r)
    return _radial_derivative_vector(False, tc.hess_grad, np.asarray(nv, float), np.asarray(a, float), np.asarray(b, float))


def theta_h_apply(M: ModelManifold, w: RadialWeight, r, nv, v2, v1) -> np.ndarray:
    """Theta^h(v2)(v1) = 1/2 Theta(v2)(v1) + nabla^2(grad h)(v2, v1) + R(grad h, v2) v1."""
    tc = tensor_coefficients(M, w, r)
    return theta_h_from(M, w, tc, np.asarray(nv, float), np.asarray(v2, float), np.asarray(v1, float))


def curvature_norm(M: ModelManifold, r=None, nv=None, samples: int = 4000, rng=None) -> float:
    """sup over unit v1, v2 of the Hilbert-Schmidt norm of X -> R(X, v2) v1.

    Closed form |kappa| sqrt(n-1) for space forms; otherwise maximized over
    random unit pairs followed by local refinement.
    """
    if M.is_space_form:
        return abs(float(M.kappa)) * math.sqrt(M.n - 1)
    n = M.n
    rng = np.random.default_rng(0) if rng is None else rng

    def hs(v1, v2):
        E = np.eye(n)
        vals = curvature_apply(M, r, nv, E, v2[None, :], v1[None, :])
        return math.sqrt(float(np.sum(vals**2)))

    best = 0.0
    cands = rng.standard_normal((samples, 2, n))
    cands /= np.linalg.norm(cands, axis=-1, keepdims=True)
    for v1, v2 in cands[: min(samples, 400)]:
        best = max(best, hs(v1, v2))
    # the maximum over pairs of basis-adapted vectors is attained among
    # radial/tangential combinations; include them explicitly
    E = np.eye(n)
    nvec = np.asarray(nv, dtype=float)
    basis = [nvec] if np.linalg.norm(nvec) > 0 else []
    basis += list(E)
    for v1 in basis:
        for v2 in basis:
            if np.linalg.norm(v1) > 0 and np.linalg.norm(v2) > 0:
                best = max(best, hs(v1 / np.linalg.norm(v1), v2 / np.linalg.norm(v2)))
    return best


def theta_h_norm(M: ModelManifold, w: RadialWeight, r, nv, samples: int = 400, rng=None) -> float:
    """sup over unit v1, v2 of |Theta^h(v2)(v1)| (sampled plus frame vectors)."""
    n = M.n
    rng = np.random.default_rng(1) if rng is None else rng
    cands = rng.standard_normal((samples, 2, n))
    cands /= np.linalg.norm(cands, axis=-1, keepdims=True)
    E = np.eye(n)
    pairs = np.concatenate([cands, np.stack(np.broadcast_arrays(E[:, None, :], E[None, :, :]), axis=2).reshape(-1, 2, n)])
    rr = np.full(len(pairs), float(r))
    nn = np.broadcast_to(np.asarray(nv, float), (len(pairs), n))
    vals = theta_h_apply(M, w, rr, nn, pairs[:, 1], pairs[:, 0])
    return float(np.max(np.linalg.norm(vals, axis=-1)))


# ---------------------------------------------------------------------------
# pole quantities: Ruse invariant, Phi, bridge drift, Gaussian ansatz
# ---------------------------------------------------------------------------


def log_ruse(M: ModelManifold, r) -> np.ndarray:
    """log J = (n-1) log(f(r)/r)."""
    require_pole(M)
    rs = radial_scalars(M, r)
    return (M.n - 1) * np.log(rs.f_over_r)


def phi_radial(M: ModelManifold, r) -> np.ndarray:
    """Phi = 1/2 J^{1/2} Laplacian(J^{-1/2}) as a function of the pole distance."""
    require_pole(M)
    rs = radial_scalars(M, r)
    n = M.n
    lam = -(n - 1) / 2.0
    # l = lam * log(f/r): Phi = 1/2 (l'' + l'^2 + (n-1) f'/f l')
    l1 = lam * rs.lp
    l2 = lam * rs.lpp
    m_l1 = lam * (rs.lp_r + rs.lp**2)  # (1/r + lp) * l1
    return 0.5 * (l2 + l1**2 + (n - 1) * m_l1)


def phi_hyperbolic_closed_form(n: int, r) -> np.ndarray:
    """Closed form of Phi on H^n with a series below SMALL_R."""
    r = np.asarray(r, dtype=float)
    small = r < SMALL_R
    rs = np.where(small, 1.0, r)
    bracket = np.where(small, 1.0 / 3.0 - r**2 / 15.0, rs**-2 - np.sinh(rs) ** -2)
    return -((n - 1) ** 2) / 8.0 + (n - 1) * (n - 3) / 8.0 * bracket


def laplacian_h(M: ModelManifold, w: RadialWeight, r) -> np.ndarray:
    """Laplacian of h = eta'' + (n-1) eta' f'/f."""
    rs = radial_scalars(M, r)
    return w.d2(r) + (M.n - 1) * (w.d1_over_r(r) + w.d1(r) * rs.lp)


def phi_h_radial(M: ModelManifold, w: RadialWeight, r) -> np.ndarray:
    """Phi^h = -1/2 |grad h|^2 - 1/2 Laplacian h + Phi."""
    out = phi_radial(M, r)
    if w.is_zero:
        return out
    return out - 0.5 * w.d1(r) ** 2 - 0.5 * laplacian_h(M, w, r)


def grad_log_k_radial(M: ModelManifold, tau, r) -> np.ndarray:
    """Radial component of grad log k_tau(., pole) = grad log J^{-1/2} - r grad r / tau."""
    require_pole(M)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise GeometryError("remaining time tau must be positive")
    return -0.5 * (M.n - 1) * log_ratio_slope(M, r) - np.asarray(r) / tau


def log_k(M: ModelManifold, tau, r) -> np.ndarray:
    """log of the Gaussian ansatz k_tau = (2 pi tau)^{-n/2} exp(-r^2/2tau) J^{-1/2}."""
    require_pole(M)
    tau = np.asarray(tau, dtype=float)
    r = np.asarray(r, dtype=float)
    return -0.5 * M.n * np.log(2 * np.pi * tau) - r**2 / (2 * tau) - 0.5 * log_ruse(M, r)


# ---------------------------------------------------------------------------
# point-level API (ambient vectors)
# ---------------------------------------------------------------------------


def _local(M, x):
    x = np.asarray(x, dtype=float)
    u = adapted_frame(M, x)
    r, N = radial_field(M, x)
    nv = to_frame(M, u, N)
    return u, np.asarray(r, dtype=float), nv


def curvature(M: ModelManifold, x, X, Y, Z) -> np.ndarray:
    u, r, nv = _local(M, x)
    c = curvature_apply(M, r, nv, to_frame(M, u, X), to_frame(M, u, Y), to_frame(M, u, Z))
    return from_frame(u, c)


def ricci(M: ModelManifold, x, X, Y) -> float:
    u, r, nv = _local(M, x)
    Ric = ricci_matrix(M, r, nv)
    return float(to_frame(M, u, X) @ Ric @ to_frame(M, u, Y))


def ricci_minus_2hess(M: ModelManifold, w: RadialWeight, x, v) -> float:
    """(Ric - 2 Hess h)(v, v)."""
    u, r, nv = _local(M, x)
    c = to_frame(M, u, v)
    mat = ricci_matrix(M, r, nv) - 2.0 * hess_h_matrix(M, w, r, nv)
    return float(c @ mat @ c)


def theta(M: ModelManifold, x, v2, v1) -> np.ndarray:
    u, r, nv = _local(M, x)
    return from_frame(u, theta_apply(M, r, nv, to_frame(M, u, v2), to_frame(M, u, v1)))


def theta_h(M: ModelManifold, w: RadialWeight, x, v2, v1) -> np.ndarray:
    u, r, nv = _local(M, x)
    return from_frame(u, theta_h_apply(M, w, r, nv, to_frame(M, u, v2), to_frame(M, u, v1)))


def ruse_invariant(M: ModelManifold, x) -> float:
    return float(np.exp(log_ruse(M, pole_distance(M, x))))


def grad_log_ruse(M: ModelManifold, x) -> np.ndarray:
    require_pole(M)
    r, N = radial_field(M, x)
    rs = radial_scalars(M, r)
    return (M.n - 1) * rs.lp[..., None] * N if np.ndim(r) else (M.n - 1) * float(rs.lp) * N


def phi(M: ModelManifold, x) -> float:
    return float(phi_radial(M, pole_distance(M, x)))


def phi_h(M: ModelManifold, w: RadialWeight, x) -> float:
    return float(phi_h_radial(M, w, pole_distance(M, x)))


def grad_log_k(M: ModelManifold, tau: float, x) -> np.ndarray:
    """Drift of the semi-classical bridge toward the pole at remaining time tau."""
    r, N = radial_field(M, x)
    return np.asarray(grad_log_k_radial(M, tau, r))[..., None] * N if np.ndim(r) else float(grad_log_k_radial(M, tau, r)) * N


def weight_value(M: ModelManifold, w: RadialWeight, x) -> np.ndarray:
    return w.eta(pole_distance(M, x))


def grad_weight(M: ModelManifold, w: RadialWeight, x) -> np.ndarray:
    r, N = radial_field(M, x)
    return np.asarray(w.d1(r))[..., None] * N


# ---------------------------------------------------------------------------
# warped products: geodesic flow in normal coordinates
# ---------------------------------------------------------------------------


def _hamilton_coefficients(M: ModelManifold, r):
    """Coefficients of H(y, p) = 1/2 (sigma |p|^2 + tau (y.p)^2).

    sigma = (r/f)^2, tau = (1 - sigma)/r^2; also sigma'/r and tau'/r.
    """
    prof = M.profile
    L2, L4, L6 = _log_series(prof)
    small = r < HAMILTON_SERIES_R
    rs = np.where(small, 1.0, r)
    f, df = prof.f(rs), prof.df(rs)
    ratio = rs / f
    sigma_d = ratio**2
    lp = df / f - 1.0 / rs
    sigma1_d = -2.0 * (lp / rs) * sigma_d
    tau_d = (1.0 - sigma_d) / rs**2
    tau1_d = -sigma1_d / rs**2 - 2.0 * tau_d / rs**2
    ell = L2 * r**2 + L4 * r**4 + L6 * r**6
    sigma_s = np.exp(-2.0 * ell)
    lp_r_s = 2 * L2 + 4 * L4 * r**2 + 6 * L6 * r**4
    sigma1_s = -2.0 * lp_r_s * sigma_s
    t0, t2, t4 = 2 * L2, 2 * L4 - 2 * L2**2, 2 * L6 - 4 * L2 * L4 + 4.0 / 3.0 * L2**3
    tau_s = t0 + t2 * r**2 + t4 * r**4
    tau1_s = 2 * t2 + 4 * t4 * r**2
    return (
        np.where(small, sigma_s, sigma_d),
        np.where(small, sigma1_s, sigma1_d),
        np.where(small, tau_s, tau_d),
        np.where(small, tau1_s, tau1_d),
    )


def _hamilton_rhs(M, y, p):
    r = np.linalg.norm(y, axis=-1)
    sig, sig1, tau, tau1 = _hamilton_coefficients(M, r)
    yp = _dot(y, p)
    pp = _dot(p, p)
    dy = sig[..., None] * p + (tau * yp)[..., None] * y
    dp = -0.5 * (sig1 * pp + tau1 * yp**2)[..., None] * y - (tau * yp)[..., None] * p
    return dy, dp


def _hamiltonian(M, y, p):
    r = np.linalg.norm(y, axis=-1)
    sig, _, tau, _ = _hamilton_coefficients(M, r)
    return 0.5 * (sig * _dot(p, p) + tau * _dot(y, p) ** 2)


def _warped_flow(M, y, p, substeps: int):
    h = 1.0 / substeps
    for _ in range(substeps):
        k1y, k1p = _hamilton_rhs(M, y, p)
        k2y, k2p = _hamilton_rhs(M, y + 0.5 * h * k1y, p + 0.5 * h * k1p)
        k3y, k3p = _hamilton_rhs(M, y + 0.5 * h * k2y, p + 0.5 * h * k2p)
        k4y, k4p = _hamilton_rhs(M, y + h * k3y, p + h * k3p)
        y = y + h / 6.0 * (k1y + 2 * k2y + 2 * k3y + k4y)
        p = p + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    return y, p


def _warped_exp_and_transport(M, y, u, w, max_arc: float = 0.025, energy_tol: float = 1e-8):
    y = np.asarray(y, dtype=float)
    r0 = np.linalg.norm(y, axis=-1)
    at_pole = r0 < 1e-300
    omega = np.where(at_pole[..., None], 0.0, y / np.where(at_pole, 1.0, r0)[..., None])
    wr = _dot(w, omega)
    wperp = w - wr[..., None] * omega
    q = np.linalg.norm(wperp, axis=-1)
    fr0 = radial_scalars(M, r0).f_over_r
    p0 = wr[..., None] * omega + fr0[..., None] * wperp
    speed = np.linalg.norm(w, axis=-1)
    substeps = int(min(max(2, math.ceil(float(np.max(speed, initial=0.0)) / max_arc)), 4096))
    y1, p1 = _warped_flow(M, y, p0, substeps)
    energy = _hamiltonian(M, y1, p1)
    target = 0.5 * speed**2
    err = np.abs(energy - target)
    if np.any(err > energy_tol * np.maximum(target, 1e-300) + 1e-14):
        bad = int(np.argmax(err))
        raise GeometryError(
            f"warped geodesic integration lost accuracy (energy error {err.flat[bad]:.3e}); step too large"
        )
    # transport: rotation in the plane spanned by omega and the tangential part of w
    rotate = (q > 1e-14 * np.maximum(speed, 1e-300)) & ~at_pole
    ea = omega
    eb = np.where(rotate[..., None], wperp / np.where(rotate, q, 1.0)[..., None], 0.0)
    ang0 = np.arctan2(q, wr)
    r1 = np.linalg.norm(y1, axis=-1)
    om1 = y1 / np.where(r1 > 0, r1, 1.0)[..., None]
    pr = _dot(om1, p1)
    inv_fr1 = 1.0 / radial_scalars(M, r1).f_over_r
    vamb = pr[..., None] * om1 + inv_fr1[..., None] * (p1 - pr[..., None] * om1)
    ang1 = np.arctan2(_dot(vamb, eb), _dot(vamb, ea))
    delta = np.where(rotate, ang1 - ang0, 0.0)
    ua = np.einsum("...kd,...d->...k", u, ea)
    ub = np.einsum("...kd,...d->...k", u, eb)
    c, s = np.cos(delta)[..., None], np.sin(delta)[..., None]
    na = ua * c - ub * s
    nb = ua * s + ub * c
    u1 = u + (na - ua)[..., None] * ea[..., None, :] + (nb - ub)[..., None] * eb[..., None, :]
    return y1, u1


def _warped_distance(M, x, y):
    """Geodesic distance for warped products by shooting (single pairs or batches)."""
    from scipy.optimize import least_squares

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast_shapes(x.shape, y.shape)
    xb = np.broadcast_to(x, shape).reshape(-1, M.n)
    yb = np.broadcast_to(y, shape).reshape(-1, M.n)
    out = np.empty(len(xb))
    for i, (a, b) in enumerate(zip(xb, yb)):
        if np.linalg.norm(b) == 0.0 or np.linalg.norm(a) == 0.0:
            out[i] = max(np.linalg.norm(a), np.linalg.norm(b))
            continue
        if np.linalg.norm(a - b) == 0.0:
            out[i] = 0.0
            continue
        u0 = np.eye(M.n)[None]

        def resid(v):
            y1, _ = _warped_exp_and_transport(M, a[None], u0, v[None], energy_tol=1e-6)
            return y1[0] - b

        ra = np.linalg.norm(a)
        guess = b - a
        guess = guess - (guess @ a / ra**2) * a * (1 - 1.0 / float(radial_scalars(M, np.array(ra)).f_over_r))
        sol = least_squares(resid, guess, xtol=1e-14, ftol=1e-14, gtol=1e-14)
        out[i] = float(np.linalg.norm(sol.x))
    return out.reshape(shape[:-1]) if shape[:-1] else out[0]
