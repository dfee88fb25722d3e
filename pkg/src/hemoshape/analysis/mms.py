"""Manufactured solutions on a fixed square for solver verification.

The velocity is a smooth divergence-free field whose strain rate never
vanishes, so the forcing is smooth for every ``q``. With ``time="linear"`` the
solution is affine in ``t`` and backward Euler reproduces it exactly in
time, which isolates the spatial error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import sympy as sp

from ..discretization.fem import FEValues, collapsed_gauss
from ..discretization.mesh import MovingMesh, rectangle_mesh
from ..geometry import HoldAll, VelocityFieldSpec
from ..rheology import RheologyParams
from ..solver import InitialData, SolverConfig, solve_forward


@dataclass
class Manufactured:
    q: float
    velocity: object  # (t, pts) -> (N, 2)
    pressure: object
    forcing: object
    expressions: dict


def manufactured(q: float, time: str = "linear", strain: float = 3.0, amp: float = 0.25):
    """Symbolic ``u, pi`` and the forcing of the momentum equation for exponent ``q``."""
    x, y, t = sp.symbols("x y t", real=True)
    theta = (1 + t) if time == "linear" else (1 + sp.sin(2 * t))
    psi = theta * (amp * sp.sin(sp.pi * x) * sp.sin(sp.pi * y) + strain * x * y)
    u = sp.Matrix([sp.diff(psi, y), -sp.diff(psi, x)])
    pi_ = theta * sp.cos(sp.pi * x) * sp.cos(sp.pi * y)
    X = [x, y]
    G = sp.Matrix(2, 2, lambda i, j: sp.diff(u[i], X[j]))
    D = (G + G.T) / 2
    nrm = sp.sqrt(sum(D[i, j] ** 2 for i in range(2) for j in range(2)))
    S = (1 + nrm) ** (sp.Rational(q).limit_denominator(1000) - 2) * D
    f = sp.Matrix([sp.diff(u[i], t) + sum(u[j] * G[i, j] for j in range(2))
                   - sum(sp.diff(S[i, j], X[j]) for j in range(2)) + sp.diff(pi_, X[i])
                   for i in range(2)])
    fu = sp.lambdify((t, x, y), list(u), "numpy")
    fp = sp.lambdify((t, x, y), pi_, "numpy")
    ff = sp.lambdify((t, x, y), list(f), "numpy")

    def vec(fun):
        def ev(tt, pts):
            pts = np.atleast_2d(pts)
            vals = fun(tt, pts[:, 0], pts[:, 1])
            return np.column_stack([np.broadcast_to(v, len(pts)) for v in vals]).astype(float)
        return ev

    def pres(tt, pts):
        return np.broadcast_to(fp(tt, pts[:, 0], pts[:, 1]), len(pts)).astype(float)

    return Manufactured(q, vec(fu), pres, vec(ff), {"u": u, "pi": pi_, "f": f})


def square_moving_mesh(n: int, times):
    hold = HoldAll(-0.5, 1.5, -0.5, 1.5, float(times[-1]))
    return MovingMesh.build(rectangle_mesh(n), VelocityFieldSpec.zero(hold), times)


def mms_error(q: float, n: int, dt: float, steps: int, time="linear", m_schedule=(math.inf,),
              picard_tol=1e-10):
    """``L2(0,T; L2)`` velocity error of the solver on an ``n x n`` square mesh."""
    ms = manufactured(q, time)
    times = dt * np.arange(steps + 1)
    md = square_moving_mesh(n, times)
    rp = RheologyParams(q, RheologyParams.p_min(q), m_schedule)
    cfg = SolverConfig(dt=dt, picard_tol=picard_tol, picard_max=100)
    init = InitialData(mode="exact", exact=lambda pts: ms.velocity(0.0, pts))
    state, _ = solve_forward(md, None, rp, init, ms.forcing, cfg, dirichlet=ms.velocity,
                             ledger=False)
    fe = FEValues.build(md.layer(0), collapsed_gauss(6))
    errs = []
    for tt, u in zip(times, state.velocity_coeffs):
        diff = fe.values(u) - ms.velocity(tt, fe.x.reshape(-1, 2)).reshape(fe.x.shape)
        errs.append(fe.integrate(np.sum(diff ** 2, axis=-1)))
    errs = np.array(errs)
    w = np.full(len(times), dt)
    w[0] = w[-1] = 0.5 * dt
    return float(np.sqrt(w @ errs)), state


def observed_orders(sizes, errors):
    sizes = np.asarray(sizes, float)
    errors = np.asarray(errors, float)
    return np.log(errors[:-1] / errors[1:]) / np.log(sizes[:-1] / sizes[1:])
