"""Admissible domains, admissible velocity fields, flow maps and set predicates.

Domains are star-shaped around ``center`` with boundary radius
``r(theta) = r0 + sum_j a_j cos(j theta) + b_j sin(j theta)``. The cone
property is certified through the surrogate ``|r'(theta)| <= lip_bound r(theta)``:
a star-shaped domain whose radial function has bounded logarithmic
derivative has a Lipschitz boundary, and Lipschitz domains are exactly the
domains with the cone property (the cone angle shrinks as ``lip_bound`` grows).

Velocity fields are rotated gradients ``V = (d_y psi, -d_x psi)`` of stream
functions ``psi(t, x) = sum_i s_i(t) Phi_i(|x - c_i|^2)``, each ``Phi_i`` a
compactly supported piecewise polynomial. Such ``V`` is divergence free at
every point and its C^{1,1} norm admits an exact piecewise-polynomial bound.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from math import comb

import numpy as np
import shapely
from numpy.polynomial import Polynomial


class AdmissibilityError(ValueError):
    """A geometry object failed its admissibility certificate."""

    def __init__(self, msg, violation=math.inf):
        super().__init__(msg)
        self.violation = violation


class FlowMapError(RuntimeError):
    pass


N_CHECK = 4096


@dataclass(frozen=True)
class HoldAll:
    """Axis-aligned hold-all box ``D`` and time horizon ``T``."""

    xmin: float = -2.0
    xmax: float = 2.0
    ymin: float = -2.0
    ymax: float = 2.0
    T: float = 1.0

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise AdmissibilityError("hold-all box has non-positive side length")
        if not self.T > 0:
            raise AdmissibilityError("time horizon must be positive")

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def volume(self):
        """Measure of the space-time cylinder ``(0, T) x D``."""
        return self.area * self.T

    @property
    def min_side(self):
        return min(self.xmax - self.xmin, self.ymax - self.ymin)

    def distance_to_boundary(self, pts):
        pts = np.atleast_2d(pts)
        return np.minimum.reduce([pts[:, 0] - self.xmin, self.xmax - pts[:, 0],
                                  pts[:, 1] - self.ymin, self.ymax - pts[:, 1]])

    def to_dict(self):
        return {"bbox": [self.xmin, self.xmax, self.ymin, self.ymax], "horizon": self.T}

    @classmethod
    def from_dict(cls, d):
        x0, x1, y0, y1 = d["bbox"]
        return cls(x0, x1, y0, y1, float(d["horizon"]))


# ---------------------------------------------------------------- domains

def _radius_terms(coeffs, theta, deriv=0):
    coeffs = np.asarray(coeffs, dtype=float)
    theta = np.asarray(theta, dtype=float)
    out = np.full(theta.shape, coeffs[0] if deriv == 0 else 0.0)
    nmodes = (len(coeffs) - 1) // 2
    for j in range(1, nmodes + 1):
        a, b = coeffs[2 * j - 1], coeffs[2 * j]
        if deriv == 0:
            out = out + a * np.cos(j * theta) + b * np.sin(j * theta)
        else:
            out = out + j * (-a * np.sin(j * theta) + b * np.cos(j * theta))
    return out


def domain_violation(radial_coeffs, center=(0.0, 0.0), hold_all=None, lip_bound=0.5,
                     r_min=None, margin=0.0):
    """Scalar admissibility violation of a radial parametrization (0 if admissible).

    The measure sums the excess of ``|r'|/r`` over ``lip_bound``, the
    shortfall of ``min r`` below ``r_min`` (or below 0) and the intrusion of
    the boundary into the ``margin``-collar of ``D``.
    """
    c = np.asarray(radial_coeffs, dtype=float)
    if c.ndim != 1 or len(c) % 2 == 0:
        return math.inf
    th = np.linspace(0.0, 2 * np.pi, N_CHECK, endpoint=False)
    r = _radius_terms(c, th)
    dr = _radius_terms(c, th, 1)
    floor = 0.0 if r_min is None else r_min
    v = max(0.0, floor - r.min()) + (1.0 if r.min() <= 0 else 0.0)
    rp = np.maximum(r, 1e-300)
    v += max(0.0, float(np.max(np.abs(dr) / rp)) - lip_bound) if r.min() > 0 else 1.0
    if hold_all is not None:
        pts = np.column_stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th)])
        v += max(0.0, margin - float(hold_all.distance_to_boundary(pts).min()))
        if hold_all.distance_to_boundary(np.asarray(center, float)[None])[0] <= 0:
            v += 1.0
    return float(v)


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Certified star-shaped initial domain."""

    radial_coeffs: tuple
    center: tuple = (0.0, 0.0)
    hold_all: HoldAll = field(default_factory=HoldAll)
    lip_bound: float = 0.5
    r_min: float | None = None
    r_max: float | None = None
    margin: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "radial_coeffs", tuple(float(x) for x in self.radial_coeffs))
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))
        if len(self.radial_coeffs) % 2 == 0:
            raise AdmissibilityError("radial_coeffs must be [r0, a1, b1, ...] (odd length)")
        if self.margin <= 0:
            raise AdmissibilityError("hold-all margin must be positive")
        th = np.linspace(0.0, 2 * np.pi, N_CHECK, endpoint=False)
        r = self.radius(th)
        if self.r_min is None:
            object.__setattr__(self, "r_min", float(r.min()))
        if self.r_max is None:
            object.__setattr__(self, "r_max", float(r.max()))
        if not self.r_min > 0:
            raise AdmissibilityError(f"r_min={self.r_min} must be positive", 1.0)
        if r.min() < self.r_min * (1 - 1e-12):
            raise AdmissibilityError(f"min r(theta)={r.min():.6g} below r_min={self.r_min}",
                                     self.r_min - r.min())
        if r.max() > self.r_max * (1 + 1e-12):
            raise AdmissibilityError(f"max r(theta)={r.max():.6g} above r_max={self.r_max}",
                                     r.max() - self.r_max)
        v = domain_violation(self.radial_coeffs, self.center, self.hold_all,
                             self.lip_bound, self.r_min, self.margin)
        if v > 0:
            raise AdmissibilityError(f"domain not admissible (violation {v:.3e})", v)

    # -- shape queries
    def radius(self, theta):
        return _radius_terms(self.radial_coeffs, theta)

    def dradius(self, theta):
        return _radius_terms(self.radial_coeffs, theta, 1)

    def boundary(self, n=1024):
        """Counter-clockwise boundary polygon with ``n`` vertices."""
        th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        r = self.radius(th)
        return np.column_stack([self.center[0] + r * np.cos(th), self.center[1] + r * np.sin(th)])

    def area(self):
        """Exact area ``(1/2) int r^2 dtheta``."""
        c = np.asarray(self.radial_coeffs)
        return float(np.pi * (c[0] ** 2 + 0.5 * np.sum(c[1:] ** 2)))

    @cached_property
    def polygon(self):
        return shapely.Polygon(self.boundary(N_CHECK // 4))

    def signed_distance(self, pts):
        return signed_distance(self.polygon, pts)

    def to_dict(self):
        return {"radial_coeffs": list(self.radial_coeffs), "center": list(self.center),
                "r_min": self.r_min, "r_max": self.r_max, "lip_bound": self.lip_bound}

    @classmethod
    def from_dict(cls, d, hold_all):
        return cls(tuple(d["radial_coeffs"]), tuple(d.get("center", (0.0, 0.0))), hold_all,
                   float(d.get("lip_bound", 0.5)), d.get("r_min"), d.get("r_max"))


def disk(radius, center=(0.0, 0.0), hold_all=None, **kw):
    return DomainSpec((float(radius),), center, hold_all or HoldAll(), **kw)


def signed_distance(polygon, pts):
    """Distance to the polygon boundary, negative inside."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    d = shapely.distance(polygon.exterior, shapely.points(pts))
    inside = shapely.contains_xy(polygon, pts[:, 0], pts[:, 1])
    return np.where(inside, -d, d)


# ---------------------------------------------------------- velocity fields

def _local(coef, lo, hi):
    """Polynomial given by its coefficients in ``s = (rho - lo)/(hi - lo)``."""
    return Polynomial(coef, domain=[lo, hi], window=[0.0, 1.0])


def _profile_pieces(kind, radius, inner=None):
    """Piecewise polynomial ``Phi(rho)`` in ``rho = |x - c|^2``.

    ``bump``: ``R (1 - rho/R^2)^4`` on ``rho < R^2``.
    ``rotor``: ``-(rho/2) chi(rho)`` with ``chi = 1`` for ``|x - c| <= inner``
    and a C^3 septic transition to 0 at ``R``; ``V`` is then the rigid
    rotation ``(-y, x)`` on the plateau.
    """
    R2 = radius * radius
    if kind == "bump":
        return [(0.0, R2, radius * _local([1.0, -1.0], 0.0, R2) ** 4)]
    if kind == "rotor":
        if inner is None or not 0 < inner < radius:
            raise AdmissibilityError("rotor needs 0 < plateau radius < radius")
        r1 = inner * inner
        smooth = _local([0, 0, 0, 0, 35, -84, 70, -20], r1, R2)
        half = _local([-0.5 * r1, -0.5 * (R2 - r1)], r1, R2)
        return [(0.0, r1, _local([0.0, -0.5 * r1], 0.0, r1)), (r1, R2, half * (1.0 - smooth))]
    raise AdmissibilityError(f"unknown bump kind {kind!r}")


def _poly_abs_sup(P, lo, hi):
    """Exact ``sup |P|`` over ``[lo, hi]`` from endpoints and critical points."""
    cand = [lo, hi]
    dP = P.deriv()
    if dP.degree() >= 1:
        for r in dP.roots():
            if abs(r.imag) < 1e-12 and lo <= r.real <= hi:
                cand.append(r.real)
    return float(max(abs(P(x)) for x in cand))


@dataclass(frozen=True)
class _Basis:
    center: np.ndarray
    radius: float
    pieces: list  # (lo, hi, Phi, dPhi, d2Phi, d3Phi)

    def derivs(self, pts):
        """``rho``, ``d`` and ``Phi', Phi'', Phi'''`` at ``pts``."""
        d = pts - self.center
        rho = np.einsum("ni,ni->n", d, d)
        f1 = np.zeros_like(rho)
        f2 = np.zeros_like(rho)
        f3 = np.zeros_like(rho)
        for lo, hi, _, p1, p2, p3 in self.pieces:
            m = (rho >= lo) & (rho < hi)
            if np.any(m):
                x = rho[m]
                f1[m], f2[m], f3[m] = p1(x), p2(x), p3(x)
        return d, rho, f1, f2, f3

    def sup_norms(self):
        """Exact sups of |v|, |grad v|, |grad^2 v| (Frobenius) over the plane."""
        g0 = g1 = g2 = 0.0
        for lo, hi, _, p1, p2, p3 in self.pieces:
            rho = _local([lo, hi - lo], lo, hi)
            n0 = 4 * p1 ** 2 * rho
            n1 = 16 * p2 ** 2 * rho ** 2 + 16 * p1 * p2 * rho + 8 * p1 ** 2
            n2 = 64 * p3 ** 2 * rho ** 3 + 192 * p3 * p2 * rho ** 2 + 192 * p2 ** 2 * rho
            g0 = max(g0, _poly_abs_sup(n0, lo, hi))
            g1 = max(g1, _poly_abs_sup(n1, lo, hi))
            g2 = max(g2, _poly_abs_sup(n2, lo, hi))
        return math.sqrt(g0), math.sqrt(g1), math.sqrt(g2)


ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])  # V = ROT @ grad psi


def _bernstein(coeffs, tau, deriv=0):
    """Bernstein polynomial ``sum c_k B_k^n(tau)`` and its tau-derivatives."""
    c = np.asarray(coeffs, dtype=float)
    for _ in range(deriv):
        n = len(c) - 1
        if n <= 0:
            return np.zeros_like(np.asarray(tau, dtype=float))
        c = n * np.diff(c)
    n = len(c) - 1
    tau = np.asarray(tau, dtype=float)
    out = np.zeros_like(tau)
    for k, ck in enumerate(c):
        out = out + ck * comb(n, k) * tau ** k * (1 - tau) ** (n - k)
    return out


def _bernstein_bounds(coeffs):
    c = np.asarray(coeffs, dtype=float)
    bounds = []
    for _ in range(3):
        bounds.append(float(np.abs(c).max()) if len(c) else 0.0)
        n = len(c) - 1
        c = n * np.diff(c) if n > 0 else np.zeros(0)
    return bounds


@dataclass(frozen=True, eq=False)
class VelocityFieldSpec:
    """Certified solenoidal driving field.

    ``stream_coeffs[i]`` holds the Bernstein coefficients (in ``t / T``) of
    the amplitude of bump ``i``. ``bump`` amplitudes carry velocity units;
    ``rotor`` amplitudes are angular velocities.
    """

    bump_centers: tuple
    bump_radii: tuple
    stream_coeffs: tuple
    hold_all: HoldAll = field(default_factory=HoldAll)
    c_V: float = 1.0
    bump_kinds: tuple | None = None
    plateau_radii: tuple | None = None

    def __post_init__(self):
        centers = tuple(tuple(float(v) for v in c) for c in self.bump_centers)
        radii = tuple(float(r) for r in self.bump_radii)
        coeffs = tuple(tuple(float(v) for v in row) for row in self.stream_coeffs)
        n = len(centers)
        kinds = tuple(self.bump_kinds) if self.bump_kinds is not None else ("bump",) * n
        plateau = tuple(self.plateau_radii) if self.plateau_radii is not None else (None,) * n
        for name, val in (("bump_centers", centers), ("bump_radii", radii),
                          ("stream_coeffs", coeffs), ("bump_kinds", kinds),
                          ("plateau_radii", plateau)):
            object.__setattr__(self, name, val)
            if len(val) != n:
                raise AdmissibilityError(f"{name} has length {len(val)}, expected {n}")
        if any(len(row) == 0 for row in coeffs):
            raise AdmissibilityError("each bump needs at least one time coefficient")
        if not all(np.isfinite(v) for row in coeffs for v in row):
            raise AdmissibilityError("non-finite stream coefficient")
        for c, r in zip(centers, radii):
            if not r > 0:
                raise AdmissibilityError("bump radius must be positive")
            gap = float(self.hold_all.distance_to_boundary(np.array(c)[None])[0]) - r
            if gap <= 0:
                raise AdmissibilityError(
                    f"bump at {c} with radius {r} not compactly supported in D", -gap + 1e-12)
        bound = self.c11_bound()
        if bound > self.c_V * (1 + 1e-12):
            raise AdmissibilityError(f"C^(1,1) bound {bound:.6g} exceeds c_V={self.c_V}",
                                     bound - self.c_V)

    @classmethod
    def zero(cls, hold_all=None, c_V=1.0):
        return cls((), (), (), hold_all or HoldAll(), c_V)

    @cached_property
    def _bases(self):
        out = []
        for c, r, k, p in zip(self.bump_centers, self.bump_radii, self.bump_kinds,
                              self.plateau_radii):
            pieces = []
            for lo, hi, P in _profile_pieces(k, r, p):
                d1 = P.deriv()
                pieces.append((lo, hi, P, d1, d1.deriv(), d1.deriv(2)))
            out.append(_Basis(np.asarray(c, float), r, pieces))
        return out

    @property
    def n_bumps(self):
        return len(self.bump_centers)

    def amplitudes(self, t, deriv=0):
        tau = np.clip(np.asarray(t, float) / self.hold_all.T, 0.0, 1.0)
        scale = self.hold_all.T ** (-deriv)
        return np.array([scale * _bernstein(c, tau, deriv) for c in self.stream_coeffs])

    def c11_bound(self):
        """Upper bound on ``max(sup|V|, sup|D^1 V|, sup|D^2 V|)`` over ``[0,T] x D``.

        ``D^k`` collects all space-time derivatives of order ``k`` and the
        second-order sup bounds the Lipschitz constant of the first.
        """
        b0 = b1 = b2 = 0.0
        T = self.hold_all.T
        for basis, coeffs in zip(self._bases, self.stream_coeffs):
            g0, g1, g2 = basis.sup_norms()
            s0, s1, s2 = _bernstein_bounds(coeffs)
            s1, s2 = s1 / T, s2 / T ** 2
            b0 += s0 * g0
            b1 += math.hypot(s0 * g1, s1 * g0)
            b2 += math.sqrt((s0 * g2) ** 2 + 2 * (s1 * g1) ** 2 + (s2 * g0) ** 2)
        return max(b0, b1, b2)

    # -- evaluation: pts (n, 2), scalar t
    def _eval(self, t, pts, deriv_t, order):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        shape = {0: (n, 2), 1: (n, 2, 2), 2: (n, 2, 2, 2)}[order]
        out = np.zeros(shape)
        if self.n_bumps == 0:
            return out
        amps = self.amplitudes(t, deriv_t)
        eye = np.eye(2)
        for s, basis in zip(amps, self._bases):
            if s == 0.0:
                continue
            d, rho, f1, f2, f3 = basis.derivs(pts)
            if order == 0:
                g = 2 * f1[:, None] * d
                out += s * g @ ROT.T
            elif order == 1:
                h = 4 * f2[:, None, None] * d[:, :, None] * d[:, None, :] + 2 * f1[:, None, None] * eye
                out += s * np.einsum("ab,nbj->naj", ROT, h)
            else:
                t3 = (np.einsum("ij,nk->nijk", eye, d) + np.einsum("ik,nj->nijk", eye, d)
                      + np.einsum("jk,ni->nijk", eye, d))
                h3 = 8 * f3[:, None, None, None] * np.einsum("ni,nj,nk->nijk", d, d, d) \
                    + 4 * f2[:, None, None, None] * t3
                out += s * np.einsum("ab,nbjk->najk", ROT, h3)
        return out

    def velocity(self, t, pts):
        return self._eval(t, pts, 0, 0)

    def grad(self, t, pts):
        """``G[n, a, j] = d_j V_a``."""
        return self._eval(t, pts, 0, 1)

    def hessian(self, t, pts):
        return self._eval(t, pts, 0, 2)

    def dt_velocity(self, t, pts):
        return self._eval(t, pts, 1, 0)

    def dt_grad(self, t, pts):
        return self._eval(t, pts, 1, 1)

    def material_derivative(self, t, pts):
        """``d_t V + (V . grad) V``."""
        v = self.velocity(t, pts)
        return self.dt_velocity(t, pts) + np.einsum("naj,nj->na", self.grad(t, pts), v)

    def to_dict(self):
        return {"bump_centers": [list(c) for c in self.bump_centers],
                "bump_radii": list(self.bump_radii),
                "stream_coeffs": [list(r) for r in self.stream_coeffs],
                "bump_kinds": list(self.bump_kinds),
                "plateau_radii": list(self.plateau_radii),
                "c_V": self.c_V}

    @classmethod
    def from_dict(cls, d, hold_all):
        n = len(d.get("bump_centers", []))
        return cls(tuple(map(tuple, d.get("bump_centers", []))), tuple(d.get("bump_radii", [])),
                   tuple(map(tuple, d.get("stream_coeffs", []))), hold_all,
                   float(d.get("c_V", 1.0)), tuple(d.get("bump_kinds", ["bump"] * n)),
                   tuple(d.get("plateau_radii", [None] * n)))

    def with_coeffs(self, stream_coeffs, c_V=None):
        return VelocityFieldSpec(self.bump_centers, self.bump_radii, stream_coeffs,
                                 self.hold_all, self.c_V if c_V is None else c_V,
                                 self.bump_kinds, self.plateau_radii)


def field_distance_c1(a: VelocityFieldSpec, b: VelocityFieldSpec, nt=11, nx=65):
    """Sampled C^1 distance ``max(sup|V_a - V_b|, sup|(grad, d_t)(V_a - V_b)|)``.

    Sampling uses an ``nt x nx x nx`` tensor grid over ``[0, T] x D``.
    """
    if a.hold_all != b.hold_all:
        raise ValueError("fields live in different hold-all sets")
    H = a.hold_all
    xs = np.linspace(H.xmin, H.xmax, nx)
    ys = np.linspace(H.ymin, H.ymax, nx)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    d0 = d1 = 0.0
    for t in np.linspace(0.0, H.T, nt):
        dv = a.velocity(t, pts) - b.velocity(t, pts)
        dg = a.grad(t, pts) - b.grad(t, pts)
        dtv = a.dt_velocity(t, pts) - b.dt_velocity(t, pts)
        d0 = max(d0, float(np.sqrt((dv ** 2).sum(1)).max()))
        d1 = max(d1, float(np.sqrt((dg ** 2).sum((1, 2)) + (dtv ** 2).sum(1)).max()))
    if not (np.isfinite(d0) and np.isfinite(d1)):
        raise FloatingPointError("non-finite field evaluation")
    return max(d0, d1)


# ------------------------------------------------------------------ flow map

def _rk4_rhs(spec, t, x, F):
    return spec.velocity(t, x), np.matmul(spec.grad(t, x), F)


def rk4_transport(spec: VelocityFieldSpec, x, F, t0, t1, dt_ode):
    """Advance positions and Jacobians from ``t0`` to ``t1`` (either direction)."""
    span = t1 - t0
    if span == 0:
        return x, F
    nsub = max(1, int(math.ceil(abs(span) / dt_ode - 1e-9)))
    h = span / nsub
    t = t0
    for k in range(nsub):
        t = t0 + k * h
        k1x, k1F = _rk4_rhs(spec, t, x, F)
        k2x, k2F = _rk4_rhs(spec, t + h / 2, x + h / 2 * k1x, F + h / 2 * k1F)
        k3x, k3F = _rk4_rhs(spec, t + h / 2, x + h / 2 * k2x, F + h / 2 * k2F)
        k4x, k4F = _rk4_rhs(spec, t + h, x + h * k3x, F + h * k3F)
        x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        F = F + h / 6 * (k1F + 2 * k2F + 2 * k3F + k4F)
    return x, F


@dataclass(eq=False)
class FlowMap:
    """Sampled flow map ``phi(t_i, x)`` and its Jacobian at fixed points."""

    spec: VelocityFieldSpec
    dt_ode: float
    times: np.ndarray
    points: np.ndarray
    node_trajectories: np.ndarray  # (nt, n, 2)
    jacobians: np.ndarray  # (nt, n, 2, 2)

    def index(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"t={t} is not a sample time of the flow map")
        return i

    def at(self, t):
        i = self.index(t)
        return self.node_trajectories[i], self.jacobians[i]

    def det(self):
        J = self.jacobians
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]

    def inverse_points(self, t, y):
        """``phi^{-1}(t, y)`` and its Jacobian, by backward integration."""
        y = np.atleast_2d(np.asarray(y, float))
        F = np.broadcast_to(np.eye(2), (len(y), 2, 2)).copy()
        return rk4_transport(self.spec, y, F, t, 0.0, self.dt_ode)


def integrate_flow_map(spec: VelocityFieldSpec, points, grid, dt_ode=1e-3) -> FlowMap:
    """Integrate ``d_t phi = V(t, phi)`` with classical RK4 and the variational equation.

    ``grid`` is an increasing sequence of sample times starting at 0; between
    consecutive samples the step is the largest ``<= dt_ode`` that divides
    the interval.
    """
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must start at 0 and increase")
    if grid[-1] > spec.hold_all.T * (1 + 1e-12):
        raise ValueError("time grid exceeds the horizon")
    x = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    if np.any(spec.hold_all.distance_to_boundary(x) < 0):
        raise ValueError("points must lie in the closed hold-all box")
    F = np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()
    traj = np.empty((len(grid), len(x), 2))
    jac = np.empty((len(grid), len(x), 2, 2))
    traj[0], jac[0] = x, F
    for i in range(1, len(grid)):
        x, F = rk4_transport(spec, x, F, grid[i - 1], grid[i], dt_ode)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(F))):
            raise FlowMapError(f"non-finite flow map values at t={grid[i]}")
        if np.any(spec.hold_all.distance_to_boundary(x) < -1e-12):
            raise FlowMapError(f"trajectory left D at t={grid[i]}")
        traj[i], jac[i] = x, F
    return FlowMap(spec, dt_ode, grid, np.asarray(points, float), traj, jac)


def lipschitz_ratio(flow: FlowMap, n_pairs=2000, seed=0):
    """Largest sampled ``|phi(t,x) - phi(t,y)| / |x - y|`` over all sample times."""
    rng = np.random.default_rng(seed)
    n = len(flow.points)
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n, n_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    dx = np.linalg.norm(flow.points[i] - flow.points[j], axis=1)
    ok = dx > 0
    best = 0.0
    for traj in flow.node_trajectories:
        dy = np.linalg.norm(traj[i] - traj[j], axis=1)
        best = max(best, float((dy[ok] / dx[ok]).max()))
    # local ratios from the Jacobian operator norm
    best = max(best, float(np.linalg.norm(flow.jacobians, ord=2, axis=(-2, -1)).max()))
    return best


# ------------------------------------------------------------ moving domain

@dataclass(eq=False)
class MovingDomain:
    """Initial domain, flow map of its boundary samples, and the layer grid."""

    initial: DomainSpec
    velocity: VelocityFieldSpec
    times: np.ndarray
    flow: FlowMap
    n_boundary: int = 512

    @classmethod
    def build(cls, initial: DomainSpec, velocity: VelocityFieldSpec, times, dt_ode=1e-3,
              n_boundary=512):
        times = np.asarray(times, dtype=float)
        flow = integrate_flow_map(velocity, initial.boundary(n_boundary), times, dt_ode)
        return cls(initial, velocity, times, flow, n_boundary)

    @property
    def hold_all(self):
        return self.initial.hold_all

    def boundary(self, i):
        return self.flow.node_trajectories[i]

    def boundary_at(self, t):
        k = np.searchsorted(self.times, t, side="right") - 1
        k = int(np.clip(k, 0, len(self.times) - 1))
        x = self.flow.node_trajectories[k]
        if abs(self.times[k] - t) < 1e-14:
            return x
        F = np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()
        return rk4_transport(self.velocity, x, F, self.times[k], t, self.flow.dt_ode)[0]

    def polygon_at(self, t):
        return shapely.Polygon(self.boundary_at(t))

    def layer_areas(self):
        return np.array([shapely.Polygon(b).area for b in self.flow.node_trajectories])

    def write_boundary_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "vertex_index", "x", "y"])
            for t, b in zip(self.times, self.flow.node_trajectories):
                for k, (x, y) in enumerate(b):
                    w.writerow([repr(float(t)), k, repr(float(x)), repr(float(y))])


# -------------------------------------------------------------- predicates

def hausdorff_distance(a: DomainSpec, b: DomainSpec, resolution=None, return_boundary=False):
    """Hausdorff distance of the complements ``D \\ a`` and ``D \\ b``.

    Complements are sampled on a uniform grid of spacing ``resolution``
    (default ``min(r_min)/20``) augmented with both boundary polygons; the
    distance from a complement point to the other complement is exact
    (polygon distance), so the error is at most the grid gap near the
    maximizer. With ``return_boundary`` the Hausdorff distance of the two
    boundary polygons is returned as well.
    """
    if a.hold_all != b.hold_all:
        raise ValueError("domains live in different hold-all sets")
    H = a.hold_all
    rmin = min(a.r_min, b.r_min)
    h = rmin / 20 if resolution is None else float(resolution)
    if h > rmin:
        raise ValueError(f"resolution {h} coarser than r_min={rmin}")
    xs = np.arange(H.xmin, H.xmax + 0.5 * h, h)
    ys = np.arange(H.ymin, H.ymax + 0.5 * h, h)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    ba, bb = a.boundary(N_CHECK // 4), b.boundary(N_CHECK // 4)
    grid = np.column_stack([X.ravel(), Y.ravel()])
    ina = shapely.contains_xy(a.polygon, grid[:, 0], grid[:, 1])
    inb = shapely.contains_xy(b.polygon, grid[:, 0], grid[:, 1])

    def directed(outside_first, inside_second, first_boundary, second):
        # complement points of the first domain lying inside the second one;
        # their distance to the second complement is the distance to its boundary
        cand = grid[outside_first & inside_second]
        on = first_boundary[shapely.contains_xy(second.polygon, first_boundary[:, 0],
                                                first_boundary[:, 1])]
        cand = np.vstack([cand, on])
        if len(cand) == 0:
            return 0.0
        return float(shapely.distance(second.polygon.exterior, shapely.points(cand)).max())

    d_ab = directed(~ina, inb, ba, b)
    d_ba = directed(~inb, ina, bb, a)
    d = max(d_ab, d_ba)
    if return_boundary:
        return d, boundary_hausdorff(ba, bb)
    return d


def boundary_hausdorff(pa, pb):
    from scipy.spatial.distance import directed_hausdorff
    return max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])


def interior_set(spec: DomainSpec, eps: float):
    """Polygon approximation of ``{x in Omega : dist(x, boundary) > eps}``.

    Returns a (possibly empty) shapely geometry.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    return spec.polygon.buffer(-eps, quad_segs=32)


def verify_compact_inclusion(samples, md: MovingDomain, margin: float) -> bool:
    """True iff every ``(t, x, y)`` sample lies in ``Omega_t`` at distance >= margin."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    for t in np.unique(samples[:, 0]):
        if t < 0 or t > md.hold_all.T * (1 + 1e-12):
            return False
        sel = samples[samples[:, 0] == t, 1:]
        sd = signed_distance(md.polygon_at(t), sel)
        if np.any(-sd < margin) or np.any(sd >= 0):
            return False
    return True


def first_inclusion_index(samples, moving_domains, margin):
    """Index of the first member of a domain sequence containing all samples."""
    for k, md in enumerate(moving_domains):
        if verify_compact_inclusion(samples, md, margin):
            return k
    return None


def sample_interior(polygon, n, times, seed=0):
    """Seeded uniform samples ``(t, x, y)`` from a polygon at the given times."""
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = polygon.bounds
    out = []
    while sum(len(o) for o in out) < n:
        p = rng.uniform([x0, y0], [x1, y1], size=(4 * n, 2))
        out.append(p[shapely.contains_xy(polygon, p[:, 0], p[:, 1])])
    p = np.vstack(out)[:n]
    t = np.asarray(times, float)[rng.integers(0, len(times), n)]
    return np.column_stack([t, p])
