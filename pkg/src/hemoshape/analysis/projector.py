"""Solenoidal, compactly supported approximations of test fields.

The construction follows the density argument for divergence-free test
functions on a moving domain:

1. pull each layer back to the reference domain with the Piola map and
   extend evenly in time to ``(-T, T)``;
2. multiply by a smooth space-time cutoff ``xi_n`` that vanishes within
   ``b/n`` of the lateral boundary and of ``t = +-T`` and equals one beyond ``a/n``;
3. mollify in space-time with a polynomial bump of radius ``c/n``;
4. push forward to each layer with the inverse Piola map;
5. subtract a discrete Bogovskii correction of the divergence defect on the
   layer submesh of elements at reference distance at least ``1/n`` from the
   boundary.

Step 5 is done on the physical layer rather than before the push-forward,
because the nodal Piola map preserves divergence only up to interpolation
error while the final field must be discretely divergence-free to rounding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve
from scipy.sparse.linalg import spsolve
from shapely.geometry import Polygon

from ..discretization.fem import (FEValues, PointLocator, divergence_matrix, h1_seminorm,
                                  l2_norm, p1_mass_matrix, p2_values, stack)
from ..discretization.mesh import Mesh, MeshError, MovingMesh, submesh
from ..geometry import signed_distance
from .bogovskii import bogovskii_rhs


class ProjectorError(ValueError):
    pass


def _adjugate(J):
    adj = np.empty_like(J)
    adj[:, 0, 0] = J[:, 1, 1]
    adj[:, 1, 1] = J[:, 0, 0]
    adj[:, 0, 1] = -J[:, 0, 1]
    adj[:, 1, 0] = -J[:, 1, 0]
    return adj


def pull_back(J, u):
    """Nodal Piola pull-back ``det(J) J^{-1} u``."""
    return np.einsum("nij,nj->ni", _adjugate(J), u)


def push_forward(J, v):
    """Nodal inverse Piola map ``J v / det(J)``."""
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    return np.einsum("nij,nj->ni", J, v) / det[:, None]


@dataclass(eq=False)
class TestField:
    """Vector test field on the layers of a moving mesh.

    Either layer-wise coefficients (``coeffs``, one ``(n_p2, 2)`` array per
    layer; values between layers are interpolated linearly in the reference
    frame) or a separable reference form: ``reference`` coefficients on the
    reference mesh times a scalar ``time_profile``, pushed forward exactly.
    """

    __test__ = False  # not a pytest class

    md: MovingMesh
    coeffs: list
    reference: np.ndarray | None = None
    time_profile: object = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n2 = self.md.reference_mesh.n_p2
        if len(self.coeffs) != self.md.layer_count:
            raise ValueError("one coefficient array per layer is required")
        self.coeffs = [np.asarray(c, float) for c in self.coeffs]
        for c in self.coeffs:
            if c.shape != (n2, 2) or not np.all(np.isfinite(c)):
                raise ValueError("coefficients must be finite arrays of shape (n_p2, 2)")

    @classmethod
    def separable(cls, md: MovingMesh, reference, time_profile):
        reference = np.asarray(reference, float)
        layers = [push_forward(md.jacobians(i), reference * float(time_profile(t)))
                  for i, t in enumerate(md.times)]
        return cls(md, layers, reference, time_profile)

    @property
    def zero_trace(self):
        b = self.md.reference_mesh.boundary_p2
        return all(np.all(c[b] == 0.0) for c in self.coeffs)

    def pulled_back(self, i):
        return pull_back(self.md.jacobians(i), self.coeffs[i])

    def norms(self, fe_layers=None):
        """Per-layer ``(L2, H1 seminorm)``."""
        fe_layers = fe_layers or layer_values(self.md)
        return np.array([[l2_norm(fe, c), h1_seminorm(fe, c)]
                         for fe, c in zip(fe_layers, self.coeffs)])


def layer_values(md: MovingMesh):
    return [FEValues.build(md.layer(i)) for i in range(md.layer_count)]


# ------------------------------------------------------------------ cutoffs

def smoothstep(x):
    """``C^infinity`` step: 0 for ``x <= 0``, 1 for ``x >= 1``."""
    x = np.clip(np.asarray(x, float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        f0 = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        f1 = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return f0 / (f0 + f1)


@dataclass(frozen=True)
class CutoffRule:
    """Support and slope constants of the cutoff and mollifier (``a > b > 1``)."""

    a: float = 3.0
    b: float = 2.0
    c: float | None = None
    gauss_nodes: int = 8
    grid_step: float = 0.005

    def __post_init__(self):
        if not self.a > self.b > 1.0:
            raise ProjectorError(f"cutoff constants need a > b > 1, got a={self.a}, b={self.b}")
        if not 0 < self.radius_factor < self.b - 1:
            raise ProjectorError(f"mollifier constant must satisfy 0 < c < b - 1, "
                                 f"got c={self.radius_factor}")

    @property
    def radius_factor(self):
        return 0.5 * (self.b - 1.0) if self.c is None else self.c

    def space(self, d, n):
        """Spatial cutoff from the reference distance ``d`` to the boundary."""
        return smoothstep((np.asarray(d) - self.b / n) / ((self.a - self.b) / n))

    def time(self, t, T, n):
        return smoothstep((T - self.b / n - np.abs(t)) / ((self.a - self.b) / n))


def _kernel(tau, dx, dy, rho):
    r2 = (tau ** 2 + dx ** 2 + dy ** 2) / rho ** 2
    return np.where(r2 < 1.0, (1.0 - r2) ** 3, 0.0)


# -------------------------------------------------------------- projector

@dataclass
class ProjectionReport:
    n: int
    divergence: np.ndarray  # per layer, || P1 projection of div ||
    support_ok: bool
    correction_norm: float  # max per-layer H1 seminorm of the Bogovskii correction
    dt_norm: float  # max L2 norm of the difference quotient in time (reference frame)

    def to_dict(self):
        return {"n": self.n, "max_divergence": float(np.max(self.divergence)),
                "support_ok": bool(self.support_ok), "correction_norm": self.correction_norm,
                "dt_norm": self.dt_norm}


class _Geometry:
    """Distance data of the reference mesh shared by all layers."""

    def __init__(self, ref: Mesh):
        loop = ref.boundary_loop()
        self.polygon = Polygon(ref.vertices[loop])
        self.d_nodes = -signed_distance(self.polygon, ref.p2_nodes)
        self.locator = PointLocator(ref)


def _layer_submesh(layer: Mesh, ref: Mesh, d_vertices, n):
    keep = np.all(d_vertices[ref.triangles] >= 1.0 / n, axis=1)
    if not keep.any():
        raise ProjectorError(f"no elements at distance >= 1/{n} from the boundary")
    sub, used = submesh(layer, keep)
    parent = -np.ones(sub.n_p2, np.int64)
    parent[sub.p2_dofs] = layer.p2_dofs[keep]
    if not np.allclose(sub.p2_nodes, layer.p2_nodes[parent]):
        raise MeshError("submesh node numbering does not match its parent")
    return sub, parent


def _correct(layer: Mesh, ref: Mesh, d_vertices, n, u):
    """Subtract the Bogovskii correction on the submesh at distance ``>= 1/n``."""
    sub, parent = _layer_submesh(layer, ref, d_vertices, n)
    fe = FEValues.build(sub)
    us = u[parent]
    if np.any(us[sub.boundary_p2] != 0.0):
        raise ProjectorError("mollified field does not vanish on the correction boundary")
    load = -(divergence_matrix(fe) @ stack(us))  # (psi_k, div u)
    if abs(load.sum()) > 1e-9 * max(np.abs(load).sum(), 1e-300):
        raise ProjectorError(f"divergence defect has nonzero mean {load.sum():.3e}")
    B = bogovskii_rhs(fe, load)
    out = np.zeros_like(u)
    out[parent] = us - B
    return out, B, fe, parent


def projected_divergence_norm(fe: FEValues, u, Mp=None):
    """``|| Pi_P1 div u ||_L2``."""
    Mp = p1_mass_matrix(fe) if Mp is None else Mp
    load = -(divergence_matrix(fe) @ stack(u))
    d = spsolve(Mp.tocsc(), load)
    return float(np.sqrt(max(d @ (Mp @ d), 0.0)))


def project_solenoidal_testfield(eta: TestField, n: int, rule: CutoffRule | None = None,
                                 return_report: bool = False):
    """Compactly supported, discretely divergence-free approximation of ``eta``.

    Parameters
    ----------
    eta : TestField
        Field with zero trace on every layer.
    n : int
        Cutoff index; support shrinks and the approximation improves as ``n`` grows.
    rule : CutoffRule, optional
        Cutoff constants; defaults ``a = 3``, ``b = 2``, ``c = (b - 1) / 2``.

    Raises
    ------
    ProjectorError
        If ``n < 1``, the input has nonzero trace, or the collar of width ``1/n``
        is thinner than two elements.
    """
    rule = rule or CutoffRule()
    if n < 1:
        raise ProjectorError(f"cutoff index must be >= 1, got {n}")
    if not eta.zero_trace:
        raise ProjectorError("test field must vanish on the boundary of every layer")
    md = eta.md
    ref = md.reference_mesh
    hmax = max(md.layer(i).h_max() for i in range(md.layer_count))
    if 0.5 / n < hmax:
        raise ProjectorError(f"n={n} too large for the mesh: collar 1/n = {1.0 / n:.4g} is "
                             f"thinner than two elements (h_max = {hmax:.4g})")
    times = np.asarray(md.times, float)
    T = float(times[-1])
    geo = _Geometry(ref)
    d_vert = geo.d_nodes[:ref.n_vertices]
    rho = rule.radius_factor / n
    hg = min(rule.grid_step, rho / 4.0)

    # reference grid padded by the kernel radius
    lo = ref.vertices.min(axis=0) - rho - 2 * hg
    hi = ref.vertices.max(axis=0) + rho + 2 * hg
    nx, ny = (np.ceil((hi - lo) / hg).astype(int) + 1)
    gx = lo[0] + hg * np.arange(nx)
    gy = lo[1] + hg * np.arange(ny)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    chi = np.zeros(len(pts))
    inside = np.flatnonzero(-signed_distance(geo.polygon, pts) > rule.b / n)
    chi[inside] = rule.space(-signed_distance(geo.polygon, pts[inside]), n)
    tri, bary = geo.locator.locate(pts[inside])
    ok = tri >= 0
    inside, tri, bary = inside[ok], tri[ok], bary[ok]
    vals = p2_values(bary)
    dofs = ref.p2_dofs[tri]

    def on_grid(c):
        g = np.zeros((len(pts), 2))
        g[inside] = np.einsum("na,nai->ni", vals, c[dofs]) * chi[inside, None]
        return g.reshape(nx, ny, 2)

    # kernel slices at Gauss-Legendre offsets, shared by every output layer
    xg, wg = np.polynomial.legendre.leggauss(rule.gauss_nodes)
    taus, wts = rho * xg, rho * wg
    m = int(math.ceil(rho / hg))
    kx = hg * np.arange(-m, m + 1)
    KX, KY = np.meshgrid(kx, kx, indexing="ij")
    kernels = [w * _kernel(tau, KX, KY, rho) for tau, w in zip(taus, wts)]
    total = sum(k.sum() for k in kernels)
    kernels = [k / total for k in kernels]

    conv_cache = {}

    def convolved(j, key, grid_fn):
        if (j, key) not in conv_cache:
            g = grid_fn()
            conv_cache[(j, key)] = np.stack(
                [fftconvolve(g[..., i], kernels[j], mode="same") for i in range(2)], axis=-1)
        return conv_cache[(j, key)]

    grids = {}

    def grid_of(key):
        if key not in grids:
            c = eta.reference if key == "ref" else eta.pulled_back(key)
            grids[key] = on_grid(c)
        return grids[key]

    def time_weights(s):
        """Coefficients of the pulled-back field at time ``s`` as ``{key: weight}``."""
        s = abs(s)  # even extension
        if eta.time_profile is not None and eta.reference is not None:
            return {"ref": float(eta.time_profile(min(s, T)))}
        if s >= T:
            return {len(times) - 1: 1.0}
        k = int(np.searchsorted(times, s, side="right")) - 1
        k = min(max(k, 0), len(times) - 2)
        lam = (s - times[k]) / (times[k + 1] - times[k])
        return {k: 1.0 - lam, k + 1: lam}

    nodes = ref.p2_nodes
    coords = [(nodes[:, 0] - lo[0]) / hg, (nodes[:, 1] - lo[1]) / hg]
    zero_nodes = geo.d_nodes < (rule.b - rule.radius_factor) / n
    out, corr, divs = [], [], []
    for i, t in enumerate(times):
        acc = np.zeros((nx, ny, 2))
        for j, tau in enumerate(taus):
            s = t - tau
            ct = float(rule.time(s, T, n))
            if ct == 0.0:
                continue
            for key, wk in time_weights(s).items():
                if wk != 0.0:
                    acc += (ct * wk) * convolved(j, key, lambda k=key: grid_of(k))
        ref_field = np.column_stack([map_coordinates(acc[..., a], coords, order=3,
                                                     mode="constant", cval=0.0)
                                     for a in range(2)])
        ref_field[zero_nodes] = 0.0
        layer = md.layer(i)
        u = push_forward(md.jacobians(i), ref_field)
        if np.any(u != 0.0):
            u, B, fe, parent = _correct(layer, ref, d_vert, n, u)
            corr.append(h1_seminorm(fe, B))
            divs.append(projected_divergence_norm(fe, u[parent]))
        else:
            corr.append(0.0)
            divs.append(0.0)
        out.append(u)

    result = TestField(md, out, info={"n": n, "rule": rule})
    if not return_report:
        return result
    support_ok = all(np.all(u[geo.d_nodes < 1.0 / n] == 0.0) for u in out) and all(
        np.all(u == 0.0) for u, t in zip(out, times)
        if abs(t) > T - (rule.b - rule.radius_factor) / n)
    fe_ref = FEValues.build(ref)
    dq = [l2_norm(fe_ref, (result.pulled_back(k + 1) - result.pulled_back(k))
                  / (times[k + 1] - times[k])) for k in range(len(times) - 1)]
    report = ProjectionReport(n, np.array(divs), bool(support_ok), float(max(corr)),
                              float(max(dq)) if dq else 0.0)
    return result, report


def layer_errors(approx: TestField, target: TestField, fe_layers=None):
    """Per-layer ``W^{1,2}`` norms of ``approx - target`` and of ``target``."""
    fe_layers = fe_layers or layer_values(target.md)
    err, size = [], []
    for fe, a, b in zip(fe_layers, approx.coeffs, target.coeffs):
        err.append(math.hypot(l2_norm(fe, a - b), h1_seminorm(fe, a - b)))
        size.append(math.hypot(l2_norm(fe, b), h1_seminorm(fe, b)))
    return np.array(err), np.array(size)


def relative_error(approx: TestField, target: TestField, fe_layers=None):
    """Largest per-layer ``W^{1,2}`` error relative to the largest per-layer norm of ``target``."""
    err, size = layer_errors(approx, target, fe_layers)
    return float(err.max() / max(size.max(), 1e-300))
