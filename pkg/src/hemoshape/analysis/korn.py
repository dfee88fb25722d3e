"""Korn and Poincare constants of a triangulated domain.

For zero-trace fields integration by parts gives the identity

    ||grad v||^2 = 2 ||D v||^2 - ||div v||^2,

so the exponent-2 Korn constant is at most sqrt(2), with equality approached by
(nearly) divergence-free fields. The discrete constant is obtained from a
generalized eigenproblem on the quadratic element space with zero trace.
For other exponents only a sampled lower bound is available and it is labeled
as an estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh

from ..discretization.fem import (FEValues, divergence_local, gradient_local, mass_matrix,
                                  strain_local, sym, unstack, vector_block)
from ..discretization.mesh import Mesh
from .bogovskii import bogovskii, random_trig_field


class EigenSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class KornResult:
    value: float
    p: float
    estimate: bool  # True when the value is a sampled lower bound
    field: np.ndarray  # maximizing field (n_p2, 2)
    samples: int = 0

    @property
    def label(self):
        return "ESTIMATE" if self.estimate else "EIGENVALUE"


@dataclass(frozen=True)
class AnalysisConstants:
    c_bogovskii: float
    c_korn: float
    c_poincare: float
    mesh_size: float

    def __post_init__(self):
        for name in ("c_bogovskii", "c_korn", "c_poincare", "mesh_size"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    def to_dict(self):
        return {"c_bogovskii": self.c_bogovskii, "c_korn": self.c_korn,
                "c_poincare": self.c_poincare, "mesh_size": self.mesh_size}


def _interior(mesh: Mesh):
    free = np.ones(mesh.n_p2, bool)
    free[mesh.boundary_p2] = False
    return np.flatnonzero(free)


def _restrict(A, keep):
    A = A.tocsr()
    return A[keep][:, keep].tocsc()


def korn_matrices(fe: FEValues):
    """``(K_grad, K_sym, K_div, free)`` on zero-trace stacked dofs."""
    n2 = fe.mesh.n_p2
    inner = _interior(fe.mesh)
    free = np.concatenate([inner, inner + n2])
    Kg = vector_block(fe, gradient_local(fe))
    Ks = vector_block(fe, strain_local(fe, np.ones(fe.w.shape)))
    Kd = vector_block(fe, divergence_local(fe))
    return _restrict(Kg, free), _restrict(Ks, free), _restrict(Kd, free), free


def korn_identity_residual(fe: FEValues, field):
    """Relative residual of ``||grad v||^2 - 2||Dv||^2 + ||div v||^2`` for a zero-trace field."""
    G = fe.gradients(field)
    D = sym(G)
    g2 = fe.integrate(np.sum(G ** 2, axis=(-2, -1)))
    d2 = fe.integrate(np.sum(D ** 2, axis=(-2, -1)))
    v2 = fe.integrate((G[..., 0, 0] + G[..., 1, 1]) ** 2)
    return abs(g2 - 2 * d2 + v2) / max(g2, 1e-300)


def random_zero_trace_field(mesh: Mesh, rng):
    """Random quadratic element field with zero boundary values."""
    v = rng.standard_normal((mesh.n_p2, 2))
    v[mesh.boundary_p2] = 0.0
    return v


def _lp_ratio(fe: FEValues, field, p):
    G = fe.gradients(field)
    num = fe.integrate(np.sqrt(np.sum(G ** 2, axis=(-2, -1))) ** p)
    den = fe.integrate(np.sqrt(np.sum(sym(G) ** 2, axis=(-2, -1))) ** p)
    if den <= 0.0:
        raise EigenSolveError("sampled field with vanishing strain rate")
    return (num / den) ** (1.0 / p)


def _eigenfield(fe: FEValues):
    Kg, Ks, _, free = korn_matrices(fe)
    if Kg.shape[0] == 0:
        raise EigenSolveError("mesh has no interior degrees of freedom")
    try:
        # smallest ||Dv||^2 / ||grad v||^2; its reciprocal is the Korn eigenvalue
        mu, vec = eigsh(Ks, k=1, M=Kg, sigma=0.0, which="LM", v0=np.ones(Kg.shape[0]))
    except (ArpackError, ArpackNoConvergence, RuntimeError) as exc:
        raise EigenSolveError(f"Korn eigenproblem failed: {exc}") from exc
    mu = float(mu[0])
    if not (math.isfinite(mu) and mu > 0):
        raise EigenSolveError(f"nonpositive Korn eigenvalue {mu}")
    full = np.zeros(2 * fe.mesh.n_p2)
    full[free] = vec[:, 0]
    return 1.0 / mu, unstack(full, fe.mesh.n_p2)


def korn_constant(mesh: Mesh, p: float = 2.0, samples: int = 64, seed: int = 0,
                  fe: FEValues | None = None) -> KornResult:
    """Discrete Korn constant ``sup ||grad v||_p / ||Dv||_p`` over zero-trace fields.

    Parameters
    ----------
    p : float
        Exponent, ``p >= 2``. For ``p == 2`` the value is the square root of the
        largest generalized eigenvalue. Otherwise it is the maximum ratio over
        ``samples`` seeded random fields and the exponent-2 eigenfield, which is
        a lower bound for the true constant.
    """
    if p < 2:
        raise ValueError(f"Korn constant requires p >= 2, got {p}")
    fe = fe or FEValues.build(mesh)
    lam, field = _eigenfield(fe)
    if p == 2:
        return KornResult(math.sqrt(lam), 2.0, False, field)
    rng = np.random.default_rng(seed)
    best, best_field = _lp_ratio(fe, field, p), field
    for _ in range(samples):
        v = random_zero_trace_field(mesh, rng)
        r = _lp_ratio(fe, v, p)
        if r > best:
            best, best_field = r, v
    return KornResult(float(best), float(p), True, best_field, samples)


def poincare_constant(mesh: Mesh, fe: FEValues | None = None) -> float:
    """``sup ||v|| / ||grad v||`` over zero-trace quadratic scalar fields."""
    fe = fe or FEValues.build(mesh)
    inner = _interior(mesh)
    K = vector_block(fe, gradient_local(fe)).tocsr()[:mesh.n_p2, :mesh.n_p2]
    M = mass_matrix(fe)
    K, M = _restrict(K, inner), _restrict(M, inner)
    try:
        lam = eigsh(K, k=1, M=M, sigma=0.0, which="LM", v0=np.ones(len(inner)),
                    return_eigenvectors=False)
    except (ArpackError, ArpackNoConvergence, RuntimeError) as exc:
        raise EigenSolveError(f"Poincare eigenproblem failed: {exc}") from exc
    return float(1.0 / math.sqrt(lam[0]))


def analysis_constants(mesh: Mesh, seed: int = 0) -> AnalysisConstants:
    """Observed Bogovskii, Korn (exponent 2) and Poincare constants of ``mesh``."""
    fe = FEValues.build(mesh)
    f = random_trig_field(mesh, seed, fe=fe)
    cb = bogovskii(f, mesh, fe).constant
    ck = korn_constant(mesh, 2.0, fe=fe).value
    return AnalysisConstants(cb, ck, poincare_constant(mesh, fe), mesh.h_max())


__all__ = ["AnalysisConstants", "EigenSolveError", "KornResult", "analysis_constants",
           "korn_constant", "korn_identity_residual", "korn_matrices", "poincare_constant",
           "random_zero_trace_field"]
