"""Implicit-Euler ALE saddle-point system for the homogenized velocity ``w = u - V``.

For a Picard guess ``w*`` on layer ``n+1`` the assembled problem reads

    (w - w_n)/dt + (a.grad) w + (w.grad) V - div(nu* D w) + grad pi = f - D_t V + div(nu* D V)
    div w = 0

with ``a = w* + V - c`` (``c`` the piecewise-linear mesh velocity), secant
viscosity ``nu* = (1+|D(w*+V)|)^(q-2) + (1/m)(1+|D(w*+V)|)^(p-2)`` and
``D_t V = d_t V + (V.grad) V``. Convection is written in skew-symmetric form,
so it drops out of the energy balance when tested with ``w``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..rheology import RheologyParams, viscosity
from .fem import (FEValues, divergence_matrix, mass_matrix, p1_load, stack, strain_local, sym,
                  unstack, vector_block, vector_load)


class SingularSystemError(RuntimeError):
    def __init__(self, msg, layer=None, iteration=None):
        super().__init__(msg)
        self.layer = layer
        self.iteration = iteration


def vector_mass(fe: FEValues):
    m = mass_matrix(fe)
    return sp.block_diag([m, m], format="csr")


def convection_local(fe: FEValues, a):
    """Skew form ``1/2 [((a.grad) u, v) - ((a.grad) v, u)]`` local matrices."""
    adv = np.einsum("tqj,tqbj->tqb", a, fe.dphi)  # a . grad phi_b
    half = 0.5 * np.einsum("tq,qa,tqb->tab", fe.w, fe.phi, adv)
    scal = half - np.swapaxes(half, 1, 2)
    loc = np.zeros((fe.mesh.n_triangles, 2, 6, 2, 6))
    for i in range(2):
        loc[:, i, :, i, :] = scal
    return loc


def exchange_local(fe: FEValues, GV):
    """``((u.grad) V, v)``: test ``(i, a)``, trial ``(j, b)`` gives ``phi_a phi_b d_j V_i``."""
    return np.einsum("tq,qa,qb,tqij->tiajb", fe.w, fe.phi, fe.phi, GV)


def tensor_load(fe: FEValues, T):
    """``int T : grad(phi_a e_i)`` for a quadrature tensor field ``T[t,q,i,j]``."""
    loc = np.einsum("tq,tqij,tqaj->tia", fe.w, T, fe.dphi)
    n = fe.mesh.n_p2
    out = np.zeros(2 * n)
    for i in range(2):
        out[i * n:(i + 1) * n] = np.bincount(fe.dofs.ravel(), loc[:, i].ravel(), minlength=n)
    return out


class Parts(dict):
    """Unreduced pieces of one assembly; sparse matrices are built on first access."""

    def __init__(self, fe, locals_, **vectors):
        super().__init__(vectors)
        self._fe = fe
        self._locals = locals_

    def __missing__(self, key):
        if key not in self._locals:
            raise KeyError(key)
        mat = vector_block(self._fe, self._locals[key])
        self[key] = mat
        return mat


@dataclass(eq=False)
class LinearSystem:
    """Saddle-point system ``[A B^T; B 0]`` with Dirichlet data and a pinned pressure.

    ``A`` is the full velocity operator, ``rhs_u`` its load. Solving removes
    the Dirichlet unknowns, fixes the pressure at vertex 0 (its continuity
    row is implied by the others for compatible data) and finally shifts the
    pressure to zero mean.
    """

    A: sp.csr_matrix
    B: sp.csr_matrix
    rhs_u: np.ndarray
    boundary: np.ndarray
    g: np.ndarray
    p1_weights: np.ndarray
    n_p2: int
    n_p1: int
    parts: dict = field(default_factory=dict)

    @property
    def matrix(self):
        """Reduced matrix actually factorized."""
        return self._reduced()[0]

    def _reduced(self):
        free = np.flatnonzero(~self.boundary)
        pres = np.arange(1, self.n_p1)
        Aff = self.A[free][:, free]
        Bf = self.B[pres][:, free]
        K = sp.bmat([[Aff, Bf.T], [Bf, None]], format="csc")
        gb = np.where(self.boundary, self.g, 0.0)
        r_u = self.rhs_u[free] - self.A[free] @ gb
        r_p = -(self.B[pres] @ gb)
        return K, np.concatenate([r_u, r_p]), free

    def solve(self, layer=None, iteration=None):
        K, rhs, free = self._reduced()
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            try:
                x = spla.spsolve(K, rhs, permc_spec="COLAMD")
            except (spla.MatrixRankWarning, RuntimeError) as exc:
                raise SingularSystemError(f"singular system at layer {layer}, Picard iteration "
                                          f"{iteration}: {exc}", layer, iteration) from exc
        if not np.all(np.isfinite(x)):
            raise SingularSystemError(f"non-finite solution at layer {layer}, Picard iteration "
                                      f"{iteration}", layer, iteration)
        u = np.where(self.boundary, self.g, 0.0)
        u[free] = x[:len(free)]
        p = np.zeros(self.n_p1)
        p[1:] = x[len(free):]
        p -= (self.p1_weights @ p) / self.p1_weights.sum()
        return unstack(u, self.n_p2), p


def assemble_weak_form(fe: FEValues, w_guess, params: RheologyParams, m: float, v_field, f,
                       dt: float, w_prev, t: float, mesh_velocity=None, dirichlet=None,
                       ) -> LinearSystem:
    """Assemble the Picard-linearized step on the layer described by ``fe``.

    Parameters
    ----------
    fe : FEValues
        Quadrature data of layer ``n+1``.
    w_guess, w_prev : (n_p2, 2) arrays
        Picard guess and the previous-layer solution (same node numbering).
    v_field : VelocityFieldSpec or None
        Driving field; ``None`` means ``V = 0``.
    f : callable ``f(t, pts) -> (N, 2)`` or None
        Body force.
    mesh_velocity : (n_vertices, 2) array, optional
        Vertex velocity of the step; zero for a fixed mesh.
    dirichlet : callable ``g(t, pts)``, optional
        Boundary values of ``w``. Defaults to zero (optimization mode).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w_guess = np.asarray(w_guess, float)
    if not np.all(np.isfinite(w_guess)):
        raise ValueError("non-finite Picard guess")
    mesh = fe.mesh
    n2, nv = mesh.n_p2, mesh.n_vertices
    pts = fe.x.reshape(-1, 2)
    shp = fe.x.shape[:2]

    if v_field is None:
        Vq = np.zeros(shp + (2,))
        GV = np.zeros(shp + (2, 2))
        DtV = np.zeros(shp + (2,))
    else:
        Vq = v_field.velocity(t, pts).reshape(shp + (2,))
        GV = v_field.grad(t, pts).reshape(shp + (2, 2))
        DtV = v_field.material_derivative(t, pts).reshape(shp + (2,))
    fq = np.zeros(shp + (2,)) if f is None else np.asarray(f(t, pts), float).reshape(shp + (2,))

    Gw = fe.gradients(w_guess)
    Du = sym(Gw + GV)
    nu = viscosity(np.sqrt(np.sum(Du ** 2, axis=(-1, -2))), params, m)

    a = fe.values(w_guess) + Vq
    if mesh_velocity is not None:
        a = a - np.stack([fe.p1_values(mesh_velocity[:, 0]),
                          fe.p1_values(mesh_velocity[:, 1])], axis=-1)

    scal_mass = np.einsum("tq,qa,qb->tab", fe.w, fe.phi, fe.phi)
    mass_loc = np.zeros((mesh.n_triangles, 2, 6, 2, 6))
    for i in range(2):
        mass_loc[:, i, :, i, :] = scal_mass
    locs = {"mass": mass_loc, "viscous": strain_local(fe, nu),
            "convection": convection_local(fe, a), "exchange": exchange_local(fe, GV)}
    A = vector_block(fe, locs["mass"] / dt + locs["viscous"] + locs["convection"]
                     + locs["exchange"])
    M = vector_block(fe, mass_loc)
    B = divergence_matrix(fe)

    work = vector_load(fe, fq - DtV)
    visc_rhs = tensor_load(fe, nu[..., None, None] * sym(GV))
    rhs_u = M @ stack(w_prev) / dt + work - visc_rhs

    bnd = np.concatenate([mesh.boundary_p2, mesh.boundary_p2])
    if dirichlet is None:
        g = np.zeros(2 * n2)
    else:
        g = stack(np.asarray(dirichlet(t, mesh.p2_nodes), float))
    parts = Parts(fe, locs, work=work, viscous_rhs=visc_rhs, nu=nu, divergence=B)
    parts["mass"] = M
    return LinearSystem(A, B, rhs_u, bnd, g, p1_load(fe, np.ones(shp)), n2, nv, parts)


def newtonian_reference(fe: FEValues, w_guess, dt, mesh_velocity=None):
    """Independent assembly of the ``q = 2`` step with ``V = 0`` from explicit loops.

    Used as an oracle in the tests; slow, intended for small meshes.
    """
    mesh = fe.mesh
    n2 = mesh.n_p2
    nt, nq = fe.w.shape
    A = np.zeros((2 * n2, 2 * n2))
    wv = fe.values(w_guess)
    if mesh_velocity is not None:
        wv = wv - np.stack([fe.p1_values(mesh_velocity[:, 0]),
                            fe.p1_values(mesh_velocity[:, 1])], axis=-1)
    for e in range(nt):
        dofs = mesh.p2_dofs[e]
        for q in range(nq):
            wt = fe.w[e, q]
            for ia, a in enumerate(dofs):
                for ib, b in enumerate(dofs):
                    pa, pb = fe.phi[q, ia], fe.phi[q, ib]
                    ga, gb = fe.dphi[e, q, ia], fe.dphi[e, q, ib]
                    for i in range(2):
                        for j in range(2):
                            # D(phi_b e_j) : D(phi_a e_i) with unit viscosity
                            val = 0.5 * ((i == j) * ga @ gb + gb[i] * ga[j])
                            if i == j:
                                val += pa * pb / dt
                                val += 0.5 * (pa * (wv[e, q] @ gb) - pb * (wv[e, q] @ ga))
                            A[i * n2 + a, j * n2 + b] += wt * val
    return A
