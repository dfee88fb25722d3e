"""Quadratic/linear Lagrange elements on triangles: tabulation, assembly and norms.

Vector P2 fields are stored as ``(n_p2, 2)`` arrays; in linear systems the two
components are stacked in blocks ``[u_x, u_y]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import Mesh
from .quadrature import TriangleRule, collapsed_gauss, gauss_degree4


def p2_values(bary):
    """P2 shape functions at barycentric points, shape ``(nq, 6)``."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                            4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0])


def p2_dlambda(bary):
    """Derivatives of the P2 shape functions w.r.t. the barycentrics, ``(nq, 6, 3)``."""
    nq = len(bary)
    d = np.zeros((nq, 6, 3))
    for k in range(3):
        d[:, k, k] = 4 * bary[:, k] - 1
    for e, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        d[:, 3 + e, i] = 4 * bary[:, j]
        d[:, 3 + e, j] = 4 * bary[:, i]
    return d


def grad_lambda(mesh: Mesh):
    """Constant barycentric gradients per triangle ``(nt, 3, 2)`` and areas."""
    p = mesh.vertices[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    g = np.empty((len(p), 3, 2))
    g[:, 1, 0] = e2[:, 1] / det
    g[:, 1, 1] = -e2[:, 0] / det
    g[:, 2, 0] = -e1[:, 1] / det
    g[:, 2, 1] = e1[:, 0] / det
    g[:, 0] = -g[:, 1] - g[:, 2]
    return g, 0.5 * det


@dataclass(eq=False)
class FEValues:
    """Everything needed to integrate P2/P1 expressions on one mesh layer."""

    mesh: Mesh
    rule: TriangleRule
    x: np.ndarray  # (nt, nq, 2) physical quadrature points
    w: np.ndarray  # (nt, nq) weights including the element area
    phi: np.ndarray  # (nq, 6)
    dphi: np.ndarray  # (nt, nq, 6, 2)
    psi: np.ndarray  # (nq, 3) P1 values

    @classmethod
    def build(cls, mesh: Mesh, rule: TriangleRule | None = None):
        rule = rule or gauss_degree4()
        g, area = grad_lambda(mesh)
        p = mesh.vertices[mesh.triangles]
        x = np.einsum("qk,tkd->tqd", rule.bary, p)
        w = area[:, None] * rule.weights[None, :]
        dphi = np.einsum("qak,tkd->tqad", p2_dlambda(rule.bary), g)
        return cls(mesh, rule, x, w, p2_values(rule.bary), dphi, rule.bary.copy())

    @property
    def dofs(self):
        return self.mesh.p2_dofs

    # -- field evaluation
    def values(self, coeffs):
        """P2 field at quadrature points; scalar -> (nt, nq), vector -> (nt, nq, 2)."""
        c = np.asarray(coeffs)[self.dofs]
        if c.ndim == 2:
            return np.einsum("qa,ta->tq", self.phi, c)
        return np.einsum("qa,tad->tqd", self.phi, c)

    def gradients(self, coeffs):
        """Gradients at quadrature points; vector fields give ``G[t,q,i,j] = d_j u_i``."""
        c = np.asarray(coeffs)[self.dofs]
        if c.ndim == 2:
            return np.einsum("tqaj,ta->tqj", self.dphi, c)
        return np.einsum("tqaj,tai->tqij", self.dphi, c)

    def p1_values(self, coeffs):
        c = np.asarray(coeffs)[self.mesh.triangles]
        return np.einsum("qk,tk->tq", self.psi, c)

    def integrate(self, vals):
        return float(np.einsum("tq,tq->", self.w, vals))


def sym(G):
    return 0.5 * (G + np.swapaxes(G, -1, -2))


class Scatter:
    """Fixed CSR pattern for local-to-global assembly.

    Entries are summed with ``bincount`` in element order, so the result
    does not depend on threading.
    """

    def __init__(self, rows, cols, shape):
        key = rows.ravel().astype(np.int64) * shape[1] + cols.ravel()
        uniq, inv = np.unique(key, return_inverse=True)
        self.inv = inv.ravel()
        self.indices = (uniq % shape[1]).astype(np.int32)
        r = uniq // shape[1]
        self.indptr = np.searchsorted(r, np.arange(shape[0] + 1)).astype(np.int32)
        self.shape = shape

    def __call__(self, loc):
        data = np.bincount(self.inv, weights=np.ravel(loc), minlength=len(self.indices))
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


def _scatter(mesh: Mesh, kind: str):
    cache = mesh._topology.setdefault("scatter", {})
    if kind in cache:
        return cache[kind]
    n, nv = mesh.n_p2, mesh.n_vertices
    d, tri = mesh.p2_dofs, mesh.triangles
    if kind == "p2":
        sc = Scatter(np.repeat(d[:, :, None], 6, 2), np.repeat(d[:, None, :], 6, 1), (n, n))
    elif kind == "p1":
        sc = Scatter(np.repeat(tri[:, :, None], 3, 2), np.repeat(tri[:, None, :], 3, 1), (nv, nv))
    elif kind == "vector":
        gi = np.arange(2)[None, :, None] * n + d[:, None, :]  # (nt, 2, 6)
        shape = (len(d), 2, 6, 2, 6)
        sc = Scatter(np.broadcast_to(gi[:, :, :, None, None], shape),
                     np.broadcast_to(gi[:, None, None, :, :], shape), (2 * n, 2 * n))
    elif kind == "div":
        cols = np.arange(2)[None, :, None] * n + d[:, None, :]
        shape = (len(d), 3, 2, 6)
        sc = Scatter(np.broadcast_to(tri[:, :, None, None], shape),
                     np.broadcast_to(cols[:, None, :, :], shape), (nv, 2 * n))
    else:
        raise KeyError(kind)
    cache[kind] = sc
    return sc


def mass_matrix(fe: FEValues, coef=None):
    """Scalar P2 mass matrix with optional weight at quadrature points."""
    wq = fe.w if coef is None else fe.w * coef
    loc = np.einsum("tq,qa,qb->tab", wq, fe.phi, fe.phi)
    return _scatter(fe.mesh, "p2")(loc)


def p1_mass_matrix(fe: FEValues):
    loc = np.einsum("tq,qa,qb->tab", fe.w, fe.psi, fe.psi)
    return _scatter(fe.mesh, "p1")(loc)


def vector_block(fe: FEValues, loc):
    """Assemble local ``(nt, 2, 6, 2, 6)`` matrices into a ``2n x 2n`` sparse matrix."""
    return _scatter(fe.mesh, "vector")(loc)


def strain_local(fe: FEValues, nu):
    """Local matrices of ``int nu D(u):D(v)`` (test index first)."""
    wq = fe.w * nu
    dd = np.einsum("tq,tqai,tqbi->tab", wq, fe.dphi, fe.dphi)
    cross = np.einsum("tq,tqaj,tqbi->tiajb", wq, fe.dphi, fe.dphi)
    loc = 0.5 * cross
    for i in range(2):
        loc[:, i, :, i, :] += 0.5 * dd
    return loc


def gradient_local(fe: FEValues, nu=None):
    """Local matrices of ``int nu grad u : grad v``."""
    wq = fe.w if nu is None else fe.w * nu
    dd = np.einsum("tq,tqai,tqbi->tab", wq, fe.dphi, fe.dphi)
    loc = np.zeros((fe.mesh.n_triangles, 2, 6, 2, 6))
    for i in range(2):
        loc[:, i, :, i, :] = dd
    return loc


def divergence_local(fe: FEValues):
    """Local ``int div u div v`` matrices."""
    return np.einsum("tq,tqai,tqbj->tiajb", fe.w, fe.dphi, fe.dphi)


def divergence_matrix(fe: FEValues):
    """``B[k, (i, a)] = -int psi_k d_i phi_a``; rows are P1 vertices."""
    loc = -np.einsum("tq,qk,tqai->tkia", fe.w, fe.psi, fe.dphi)
    return _scatter(fe.mesh, "div")(loc)


def p1_load(fe: FEValues, vals):
    """``int vals psi_k`` for quadrature values ``vals`` (nt, nq)."""
    loc = np.einsum("tq,tq,qk->tk", fe.w, vals, fe.psi)
    return np.bincount(fe.mesh.triangles.ravel(), loc.ravel(), minlength=fe.mesh.n_vertices)


def vector_load(fe: FEValues, vals):
    """``int vals . phi_a e_i`` in stacked layout for ``vals`` (nt, nq, 2)."""
    loc = np.einsum("tq,tqi,qa->tia", fe.w, vals, fe.phi)
    n = fe.mesh.n_p2
    out = np.zeros(2 * n)
    for i in range(2):
        out[i * n:(i + 1) * n] = np.bincount(fe.dofs.ravel(), loc[:, i].ravel(), minlength=n)
    return out


def stack(u):
    """``(n, 2)`` -> stacked ``[u_x, u_y]``."""
    return np.concatenate([u[:, 0], u[:, 1]])


def unstack(v, n):
    return np.column_stack([v[:n], v[n:2 * n]])


def interpolate_p2(mesh: Mesh, func):
    """Nodal interpolant at the P2 nodes; ``func`` maps (N, 2) points to values."""
    return np.asarray(func(mesh.p2_nodes))


def p1_to_p2(mesh: Mesh, vals):
    """Exact embedding of a P1 field into the P2 space."""
    e = mesh.edges
    return np.concatenate([vals, 0.5 * (vals[e[:, 0]] + vals[e[:, 1]])], axis=0)


# ------------------------------------------------------------------- norms

def error_rule():
    return collapsed_gauss(6)


def l2_norm(fe: FEValues, coeffs=None, exact=None, t=None):
    """``|| u_h - u ||_{L2}``; either part may be omitted."""
    val = 0.0
    if exact is not None:
        pts = fe.x.reshape(-1, 2)
        ex = np.asarray(exact(pts) if t is None else exact(t, pts))
        val = -ex.reshape(fe.x.shape[:2] + ex.shape[1:])
    if coeffs is not None:
        val = val + fe.values(coeffs)
    sq = val ** 2 if np.ndim(val) == 2 else np.sum(val ** 2, axis=-1)
    return float(np.sqrt(fe.integrate(sq)))


def h1_seminorm(fe: FEValues, coeffs):
    G = fe.gradients(coeffs)
    sq = np.sum(G.reshape(G.shape[0], G.shape[1], -1) ** 2, axis=-1)
    return float(np.sqrt(fe.integrate(sq)))


def divergence_l2(fe: FEValues, coeffs):
    G = fe.gradients(coeffs)
    return float(np.sqrt(fe.integrate((G[..., 0, 0] + G[..., 1, 1]) ** 2)))


# ---------------------------------------------------------- point location

@dataclass(eq=False)
class PointLocator:
    """Barycentric location of arbitrary points in a triangulation."""

    mesh: Mesh
    k: int = 12

    def __post_init__(self):
        p = self.mesh.vertices[self.mesh.triangles]
        self._tree = cKDTree(p.mean(axis=1))
        self._p = p

    def locate(self, pts, tol=1e-10):
        """Triangle index (``-1`` outside) and barycentrics for each point."""
        pts = np.atleast_2d(np.asarray(pts, float))
        k = min(self.k, self.mesh.n_triangles)
        _, cand = self._tree.query(pts, k=k)
        cand = cand.reshape(len(pts), k)
        tri = -np.ones(len(pts), np.int64)
        bary = np.zeros((len(pts), 3))
        todo = np.arange(len(pts))
        for j in range(k):
            if todo.size == 0:
                break
            c = cand[todo, j]
            b = _barycentric(self._p[c], pts[todo])
            ok = b.min(axis=1) >= -tol
            tri[todo[ok]] = c[ok]
            bary[todo[ok]] = b[ok]
            todo = todo[~ok]
        if todo.size:
            # brute force for the few points the candidate list missed
            for i in todo:
                b = _barycentric(self._p, np.broadcast_to(pts[i], (len(self._p), 2)))
                j = int(np.argmax(b.min(axis=1)))
                if b[j].min() >= -tol:
                    tri[i] = j
                    bary[i] = b[j]
        return tri, bary

    def evaluate(self, coeffs, pts, fill=0.0):
        """Evaluate a P2 field at points; points outside the mesh get ``fill``."""
        tri, bary = self.locate(pts)
        c = np.asarray(coeffs)
        out = np.full((len(tri),) + c.shape[1:], fill, dtype=float)
        ins = tri >= 0
        vals = p2_values(bary[ins])
        out[ins] = np.einsum("na,na...->n...", vals, c[self.mesh.p2_dofs[tri[ins]]])
        return out


def _barycentric(p, x):
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    r = x - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    l1 = (r[:, 0] * e2[:, 1] - r[:, 1] * e2[:, 0]) / det
    l2 = (e1[:, 0] * r[:, 1] - e1[:, 1] * r[:, 0]) / det
    return np.column_stack([1 - l1 - l2, l1, l2])
