"""Discrete right inverse of the divergence with zero boundary values.

Given a zero-mean ``f`` (P1 nodal values) the operator solves

    -Lap B + grad lam = 0,   div B = f   (weakly, against P1),   B = 0 on the boundary,

with Taylor-Hood elements. The weak constraint makes the L2 projection of
``div B`` onto P1 equal to ``f`` up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, splu, spsolve

from ..discretization.fem import (FEValues, divergence_matrix, gradient_local, h1_seminorm,
                                  l2_norm, p1_load, p1_mass_matrix, vector_block)
from ..discretization.mesh import Mesh
from ..discretization.weakform import SingularSystemError


class CompatibilityError(ValueError):
    pass


@dataclass
class BogovskiiResult:
    field: np.ndarray  # (n_p2, 2)
    residual: float  # ||P1-projection of div B - f||_L2
    constant: float  # ||B||_{W^{1,2}} / ||f||_{L2}
    f_norm: float


def projected_divergence(fe: FEValues, field, Mp=None):
    """P1 nodal values of the L2 projection of ``div field``."""
    Mp = p1_mass_matrix(fe) if Mp is None else Mp
    G = fe.gradients(field)
    return spsolve(Mp.tocsc(), p1_load(fe, G[..., 0, 0] + G[..., 1, 1]))


def bogovskii_rhs(fe: FEValues, load, rtol=1e-13, maxiter=500, accept=1e-10):
    """Solve for zero-trace ``B`` with ``(psi_k, div B) = load_k`` for every P1 basis function.

    The saddle-point system is reduced to its pressure Schur complement
    ``S = Bd A^{-1} Bd^T``, where ``A`` is the vector Laplacian (two copies of
    the scalar one, factored once) and ``Bd`` the weak divergence. ``S`` is
    solved by conjugate gradients preconditioned with the P1 mass matrix; it
    is singular only on constants, which ``load`` must be orthogonal to.
    Iteration stops at relative residual ``rtol``; if that stalls at rounding
    level the result is accepted when the residual is below ``accept``.
    """
    mesh = fe.mesh
    n2 = mesh.n_p2
    load = np.asarray(load, float)
    load = load - load.mean()  # range of S; callers check compatibility beforehand
    scale = float(np.abs(load).sum())
    if scale == 0.0:
        return np.zeros((n2, 2))
    inner = np.ones(n2, bool)
    inner[mesh.boundary_p2] = False
    inner = np.flatnonzero(inner)
    A = _scalar_laplacian(fe)
    A = A.tocsr()[inner][:, inner].tocsc()
    lu = splu(A, permc_spec="MMD_AT_PLUS_A")
    Bd = divergence_matrix(fe).tocsr()  # -(psi_k, d_i phi_a)
    Bx, By = Bd[:, inner], Bd[:, n2 + inner]
    Mp = splu(p1_mass_matrix(fe).tocsc())

    def velocity(lam):
        return -lu.solve(Bx.T @ lam), -lu.solve(By.T @ lam)

    def schur(lam):
        bx, by = velocity(lam)
        return -(Bx @ bx + By @ by)

    def precond(r):
        z = Mp.solve(r)
        return z - z.mean()

    n1 = mesh.n_vertices
    S = LinearOperator((n1, n1), matvec=schur, dtype=float)
    P = LinearOperator((n1, n1), matvec=precond, dtype=float)
    # with b = -A^{-1} Bd^T lam the constraint Bd b = -load reads S lam = load
    lam, info = cg(S, load, rtol=rtol, atol=0.0, maxiter=maxiter, M=P)
    res = np.linalg.norm(schur(lam) - load) / np.linalg.norm(load)
    if not (np.all(np.isfinite(lam)) and (info == 0 or res <= accept)):
        raise SingularSystemError(f"Bogovskii Schur iteration failed: relative residual "
                                  f"{res:.3e} after {maxiter} iterations")
    bx, by = velocity(lam)
    out = np.zeros((n2, 2))
    out[inner, 0] = bx
    out[inner, 1] = by
    return out


def _scalar_laplacian(fe: FEValues):
    return vector_block(fe, gradient_local(fe)).tocsr()[:fe.mesh.n_p2, :fe.mesh.n_p2]


def bogovskii(f, mesh: Mesh, fe: FEValues | None = None, tol=1e-10) -> BogovskiiResult:
    """Apply the discrete Bogovskii operator to P1 data ``f`` on ``mesh``.

    Raises
    ------
    CompatibilityError
        If ``|int f| > tol * ||f||``.
    """
    fe = fe or FEValues.build(mesh)
    f = np.asarray(f, float)
    if f.shape != (mesh.n_vertices,):
        raise ValueError("f must be given by its P1 vertex values")
    Mp = p1_mass_matrix(fe)
    f_norm = float(np.sqrt(f @ (Mp @ f)))
    integral = float(p1_load(fe, np.ones(fe.w.shape)) @ f)
    if abs(integral) > tol * max(f_norm, 1e-300) and abs(integral) > 1e-300:
        raise CompatibilityError(f"data must have zero mean; integral is {integral:.3e} "
                                 f"for ||f|| = {f_norm:.3e}")
    if f_norm == 0.0:
        return BogovskiiResult(np.zeros((mesh.n_p2, 2)), 0.0, 0.0, 0.0)
    field = bogovskii_rhs(fe, Mp @ f)
    d = projected_divergence(fe, field, Mp) - f
    res = float(np.sqrt(max(d @ (Mp @ d), 0.0)))
    h1 = float(np.hypot(l2_norm(fe, field), h1_seminorm(fe, field)))
    return BogovskiiResult(field, res, h1 / f_norm, f_norm)


def zero_mean_p1(fe: FEValues, vals):
    """Subtract the (exact, P1) mean of vertex values."""
    m = p1_load(fe, np.ones(fe.w.shape))
    return vals - (m @ vals) / m.sum()


def random_trig_field(mesh: Mesh, seed=0, modes=3, fe=None):
    """Seeded smooth random trigonometric P1 field with zero mean."""
    rng = np.random.default_rng(seed)
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    f = np.zeros(len(x))
    for _ in range(modes):
        kx, ky = rng.uniform(0.5, 3.0, 2)
        ph = rng.uniform(0, 2 * np.pi)
        f += rng.standard_normal() * np.cos(np.pi * (kx * x + ky * y) + ph)
    return zero_mean_p1(fe or FEValues.build(mesh), f)
