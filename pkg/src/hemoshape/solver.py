"""Forward solver: Picard iteration per time step, continuation in ``m``, energy ledger.

The unknown is the homogenized velocity ``w = u - V`` which vanishes on the
moving boundary. Each time step solves the saddle-point problem assembled
by :func:`hemoshape.discretization.weakform.assemble_weak_form` with the
viscosity frozen at the previous Picard iterate.

The weak formulation in the analysis uses test functions that vanish at the
final time; implicit Euler stepping needs no such condition and imposes none.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.linalg import spsolve

from .discretization.fem import (FEValues, divergence_matrix, p1_load, p1_mass_matrix, stack,
                                 sym, unstack)
from .discretization.mesh import MovingMesh
from .discretization.state import FlowState, trapezoid_weights
from .discretization.weakform import LinearSystem, assemble_weak_form, vector_mass
from .geometry import HoldAll, VelocityFieldSpec
from .rheology import RheologyParams, conjugate, frobenius, stress_regularized

log = logging.getLogger(__name__)


class PicardError(RuntimeError):
    def __init__(self, msg, layer, m, history):
        super().__init__(msg)
        self.layer = layer
        self.m = m
        self.history = list(history)


@dataclass(frozen=True)
class SolverConfig:
    """Time step, Picard controls and the ensemble label.

    ``m_schedule=None`` uses the schedule of the rheology parameters.
    ``seed_id = 0`` starts every Picard loop from the previous layer;
    other values add a seeded interior perturbation to that start.
    """

    dt: float
    picard_max: int = 60
    picard_tol: float = 1e-10
    m_schedule: tuple | None = None
    seed_id: int = 0
    perturbation: float = 1e-2

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max < 1:
            raise ValueError("picard_max must be >= 1")
        if self.m_schedule is not None:
            object.__setattr__(self, "m_schedule", tuple(float(m) for m in self.m_schedule))

    def schedule(self, rp: RheologyParams):
        return self.m_schedule if self.m_schedule is not None else rp.m_schedule

    def to_dict(self):
        d = asdict(self)
        if d["m_schedule"] is not None:
            d["m_schedule"] = [m if math.isfinite(m) else "inf" for m in d["m_schedule"]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("m_schedule") is not None:
            d["m_schedule"] = tuple(float(m) for m in d["m_schedule"])
        return cls(**d)


@dataclass(frozen=True)
class InitialData:
    """Initial velocity ``u_0 = V(0) + w_0`` with ``w_0`` supported inside the domain.

    ``match_V`` gives ``w_0 = 0``. ``perturbed`` adds rotated gradients of
    bumps ``a R (1 - |x-c|^2/R^2)^4`` whose supports lie inside the initial
    domain; the sum is projected onto discretely divergence-free fields.
    The ``exact`` callable (verification mode) interpolates an arbitrary
    field instead.
    """

    mode: str = "match_V"
    perturbation: tuple = ()  # ((cx, cy, R, amplitude), ...)
    exact: object = None

    def __post_init__(self):
        if self.mode not in ("match_V", "perturbed", "exact"):
            raise ValueError(f"unknown initial-data mode {self.mode!r}")
        if self.mode == "perturbed" and not self.perturbation:
            raise ValueError("perturbed initial data needs bump coefficients")
        if self.mode == "exact" and self.exact is None:
            raise ValueError("exact initial data needs a callable")

    def to_dict(self):
        return {"mode": self.mode, "perturbation": [list(b) for b in self.perturbation]}

    @classmethod
    def from_dict(cls, d):
        return cls(mode=d.get("mode", "match_V"),
                   perturbation=tuple(tuple(float(v) for v in b) for b in d.get("perturbation", ())))

    def w0(self, fe: FEValues):
        mesh = fe.mesh
        if self.mode == "match_V":
            return np.zeros((mesh.n_p2, 2))
        if self.mode == "exact":
            return np.asarray(self.exact(mesh.p2_nodes), float)
        x = mesh.p2_nodes
        bnd = mesh.vertices[mesh.boundary_vertices]
        w = np.zeros_like(x)
        for cx, cy, R, amp in self.perturbation:
            if np.min(np.hypot(bnd[:, 0] - cx, bnd[:, 1] - cy)) <= R:
                raise ValueError(f"perturbation bump at ({cx}, {cy}) with radius {R} is not "
                                 f"supported inside the domain")
            dx, dy = x[:, 0] - cx, x[:, 1] - cy
            s = np.clip(1.0 - (dx ** 2 + dy ** 2) / R ** 2, 0.0, None)
            dpsi = -4.0 * amp / R * s ** 3  # d psi / d rho
            # V = (d_y psi, -d_x psi) with d_x rho = 2 dx
            w[:, 0] += dpsi * 2 * dy
            w[:, 1] -= dpsi * 2 * dx
        return project_divergence_free(fe, w)


def project_divergence_free(fe: FEValues, w):
    """Mass-weighted projection onto zero-trace fields with ``B w = 0``."""
    mesh = fe.mesh
    M = vector_mass(fe)
    bnd = np.concatenate([mesh.boundary_p2, mesh.boundary_p2])
    ls = LinearSystem(M, divergence_matrix(fe), M @ stack(w), bnd, np.zeros(len(bnd)),
                      p1_load(fe, np.ones(fe.w.shape)), mesh.n_p2, mesh.n_vertices)
    return ls.solve()[0]


LEDGER_FIELDS = ("t", "kinetic", "dissipation_q", "regularization_p", "viscous_power",
                 "exchange", "work", "kinetic_increment", "numerical_dissipation",
                 "residual_assembled", "residual_quadrature", "relative_residual",
                 "divergence", "picard_iterations")


@dataclass
class EnergyLedger:
    """Per-layer energy terms; step quantities refer to the step ending at the layer."""

    m: float
    records: list = field(default_factory=list)

    def column(self, name):
        return np.array([r[name] for r in self.records], float)

    @property
    def times(self):
        return self.column("t")

    def max_relative_residual(self):
        r = self.column("relative_residual")[1:]
        return float(np.max(np.abs(r))) if r.size else 0.0

    def estimate_lhs(self):
        """``sup ||w||^2 + int ||Dw||_q^q + (1/m) int ||Dw||_p^p`` (trapezoid in time)."""
        wts = trapezoid_weights(self.times)
        return float(2.0 * self.column("kinetic").max()
                     + wts @ self.column("dissipation_q")
                     + wts @ self.column("regularization_p"))

    def is_finite(self):
        return all(np.isfinite(v) for r in self.records for v in r.values())

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: ("%.17g" % r[k]) for k in LEDGER_FIELDS})


def _uniform_dt(times, dt):
    d = np.diff(times)
    if len(d) and np.max(np.abs(d - dt)) > 1e-9 * dt:
        raise ValueError(f"solver dt={dt} does not match the moving-mesh time grid")


def _field_terms(fe: FEValues, w, rp, m, v_field, f, t):
    shp = fe.w.shape
    pts = fe.x.reshape(-1, 2)
    if v_field is None:
        GV = np.zeros(shp + (2, 2))
        DtV = np.zeros(shp + (2,))
    else:
        GV = v_field.grad(t, pts).reshape(shp + (2, 2))
        DtV = v_field.material_derivative(t, pts).reshape(shp + (2,))
    fq = np.zeros(shp + (2,)) if f is None else np.asarray(f(t, pts), float).reshape(shp + (2,))
    wq = fe.values(w)
    Dw = sym(fe.gradients(w))
    S = stress_regularized(Dw + sym(GV), rp, m, check=False)
    ndw = frobenius(Dw)
    return {
        "visc": fe.integrate(np.einsum("tqij,tqij->tq", S, Dw)),
        "exch": fe.integrate(np.einsum("tqj,tqij,tqi->tq", wq, GV, wq)),
        "work": fe.integrate(np.einsum("tqi,tqi->tq", fq - DtV, wq)),
        "diss_q": fe.integrate(ndw ** rp.q),
        "reg_p": fe.integrate(ndw ** rp.p) / m if math.isfinite(m) else 0.0,
        "sq": fe.integrate(np.sum(wq ** 2, axis=-1)),
    }


def _weak_div(fe, w):
    B = divergence_matrix(fe)
    Mp = p1_mass_matrix(fe)
    d = spsolve(Mp.tocsc(), B @ stack(w))
    return float(np.sqrt(max(d @ (Mp @ d), 0.0)))


def solve_forward(md: MovingMesh, v: VelocityFieldSpec | None, rp: RheologyParams,
                  init: InitialData, f, cfg: SolverConfig, dirichlet=None, fe_layers=None,
                  ledger=True):
    """March all layers for each ``m`` of the schedule (warm-started).

    Parameters
    ----------
    md : MovingMesh
        Layers of the moving mesh; its time grid must have spacing ``cfg.dt``.
    v : VelocityFieldSpec or None
        Driving field (``None`` for ``V = 0``).
    f : callable ``f(t, pts)`` or None
        Body force.
    dirichlet : callable ``g(t, pts)``, optional
        Verification mode only: boundary values of ``w``.

    Returns
    -------
    FlowState, EnergyLedger
        Fields and ledger of the last schedule entry.
    """
    times = np.asarray(md.times, float)
    _uniform_dt(times, cfg.dt)
    if fe_layers is None:
        fe_layers = [FEValues.build(md.layer(i)) for i in range(len(times))]
    n_layers = len(times)
    mesh0 = fe_layers[0].mesh
    n2 = mesh0.n_p2
    interior = ~np.concatenate([mesh0.boundary_p2, mesh0.boundary_p2])
    rng_base = np.random.SeedSequence(cfg.seed_id)

    w0 = init.w0(fe_layers[0])
    warm = None
    for m in cfg.schedule(rp):
        ws = [w0]
        ps = [np.zeros(mesh0.n_vertices)]
        records = []
        iters = [0]
        rng = np.random.default_rng(rng_base)
        for n in range(1, n_layers):
            t = float(times[n])
            fe = fe_layers[n]
            c = md.mesh_velocity(n) if isinstance(md, MovingMesh) else None
            guess = (warm[n] if warm is not None else ws[n - 1]).copy()
            if cfg.seed_id:
                noise = rng.standard_normal(2 * n2) * interior
                guess = guess + cfg.perturbation * (1.0 + np.abs(guess).max()) * unstack(noise, n2)
            history = []
            for it in range(1, cfg.picard_max + 1):
                ls = assemble_weak_form(fe, guess, rp, m, v, f, cfg.dt, ws[n - 1], t,
                                        mesh_velocity=c, dirichlet=dirichlet)
                w_new, p = ls.solve(layer=n, iteration=it)
                inc = float(np.linalg.norm(w_new - guess))
                scale = float(np.linalg.norm(w_new))
                history.append(inc / max(scale, 1e-300) if scale > 0 else inc)
                guess = w_new
                if inc <= cfg.picard_tol * scale + 1e-14:
                    break
            else:
                raise PicardError(f"Picard iteration did not converge at layer {n}, m={m}: "
                                  f"increments {history[-5:]}", n, m, history)
            if len(history) >= 4 and not all(a >= b for a, b in zip(history[-4:], history[-3:])):
                warnings.warn(f"non-monotone Picard tail at layer {n}, m={m}: {history[-4:]}")
            ws.append(guess)
            ps.append(p)
            iters.append(it)
            if ledger:
                records.append(_ledger_step(ls, fe, ws[n - 1], guess, rp, m, v, f, t, cfg.dt, it))
        warm = ws
    state = FlowState(times.copy(),
                      [w + (_interp_v(v, fe.mesh, t)) for w, fe, t in zip(ws, fe_layers, times)],
                      ps, ws, info={"m": m, "seed_id": cfg.seed_id, "picard_iterations": iters})
    led = EnergyLedger(m)
    if ledger:
        first = _field_terms(fe_layers[0], ws[0], rp, m, v, f, float(times[0]))
        led.records.append(_record(float(times[0]), first, 0.0, 0.0, 0.0, 0.0, 0.0,
                                   _weak_div(fe_layers[0], ws[0]), 0))
        led.records.extend(records)
    return state, led


def _interp_v(v, mesh, t):
    if v is None:
        return np.zeros((mesh.n_p2, 2))
    return v.velocity(float(t), mesh.p2_nodes)


def _record(t, terms, dK, numdiss, res_a, res_q, rel, div, iters):
    return {"t": t, "kinetic": 0.5 * terms["sq"], "dissipation_q": terms["diss_q"],
            "regularization_p": terms["reg_p"], "viscous_power": terms["visc"],
            "exchange": terms["exch"], "work": terms["work"], "kinetic_increment": dK,
            "numerical_dissipation": numdiss, "residual_assembled": res_a,
            "residual_quadrature": res_q, "relative_residual": rel, "divergence": div,
            "picard_iterations": iters}


def _ledger_step(ls, fe, w_old, w_new, rp, m, v, f, t, dt, iters):
    P = ls.parts
    M = P["mass"]
    a, b = stack(w_new), stack(w_old)
    d = a - b
    dK = 0.5 * (a @ (M @ a) - b @ (M @ b))
    numdiss = 0.5 * d @ (M @ d)
    visc_a = a @ (P["viscous"] @ a) + P["viscous_rhs"] @ a
    res_a = dK + numdiss + dt * (visc_a + a @ (P["exchange"] @ a)
                                 + a @ (P["convection"] @ a) - P["work"] @ a)
    terms = _field_terms(fe, w_new, rp, m, v, f, t)
    # increments measured by quadrature on the same layer
    wq_new, wq_old = fe.values(w_new), fe.values(w_old)
    dK_q = 0.5 * fe.integrate(np.sum(wq_new ** 2 - wq_old ** 2, axis=-1))
    nd_q = 0.5 * fe.integrate(np.sum((wq_new - wq_old) ** 2, axis=-1))
    res_q = dK_q + nd_q + dt * (terms["visc"] + terms["exch"] - terms["work"])
    rel = max(abs(res_a), abs(res_q)) / max(1.0, abs(terms["visc"]) * dt)
    return _record(t, terms, dK, numdiss, res_a, res_q, rel, _weak_div(fe, w_new), iters)


# ------------------------------------------------------------ energy bound

@dataclass
class EnergyBound:
    value: float
    K0: float
    F: float
    gronwall: float
    C0: float
    c_V: float
    c_K: float
    c_P: float
    f_norm: float
    q: float


def poincare_standin(hold_all: HoldAll):
    """``sqrt(1 + (L/pi)^2)`` with ``L`` the smaller box side (zero-trace fields in a strip)."""
    return math.sqrt(1.0 + (hold_all.min_side / math.pi) ** 2)


def energy_bound(rp: RheologyParams, hold_all: HoldAll, c_V: float, C0: float,
                 f_norm: float = 0.0, c_K: float = math.sqrt(2.0), c_P: float | None = None,
                 eps: float | None = None) -> EnergyBound:
    """Explicit constant of the uniform energy estimate.

    ``f_norm`` is ``||f||_{L^{q'}}`` over the hold-all cylinder and ``C0``
    bounds ``||u_0||_{L^2(D)}``. With ``eps = q/4`` the two Young splittings
    absorb half of the ``q``-dissipation, and Gronwall applied to the
    quadratic exchange term ``c_V ||w||^2`` gives the factor
    ``4 exp(2 c_V T)``.
    """
    q = rp.q
    qc = conjugate(q)
    eps = q / 4.0 if eps is None else eps
    c_P = poincare_standin(hold_all) if c_P is None else c_P
    K0 = 2.0 * (C0 ** 2 + hold_all.area * c_V ** 2)
    two = 2.0 ** (1.0 / (q - 1.0))
    F = ((c_P * c_K) ** qc / (qc * eps ** (1.0 / (q - 1.0)))
         * (two * f_norm ** qc + c_V ** qc * (two + c_V ** qc) * hold_all.volume))
    g = 4.0 * math.exp(2.0 * c_V * hold_all.T)
    return EnergyBound(g * (K0 + F), K0, F, g, C0, c_V, c_K, c_P, f_norm, q)


def energy_check(ledger: EnergyLedger, c_bound: float, residual_tol: float = 1e-6) -> dict:
    """Report-only comparison of the ledger with the bound and the balance tolerance."""
    lhs = ledger.estimate_lhs()
    res = ledger.max_relative_residual()
    return {"lhs": lhs, "c_bound": float(c_bound), "bound_ok": bool(lhs <= c_bound),
            "max_relative_residual": res, "balance_ok": bool(res <= residual_tol),
            "finite": ledger.is_finite(),
            "passed": bool(lhs <= c_bound and res <= residual_tol and ledger.is_finite())}


def f_norm_qprime(f, hold_all: HoldAll, q: float, n=64, nt=33):
    """``||f||_{L^{q'}}`` over the hold-all cylinder by tensor midpoint sampling."""
    if f is None:
        return 0.0
    qc = conjugate(q)
    xs = hold_all.xmin + (np.arange(n) + 0.5) * (hold_all.xmax - hold_all.xmin) / n
    ys = hold_all.ymin + (np.arange(n) + 0.5) * (hold_all.ymax - hold_all.ymin) / n
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    ts = (np.arange(nt) + 0.5) * hold_all.T / nt
    tot = 0.0
    for t in ts:
        tot += np.sum(np.linalg.norm(f(t, pts), axis=1) ** qc)
    return float((tot * hold_all.volume / (n * n * nt)) ** (1.0 / qc))


# ---------------------------------------------------------------- forcing

@dataclass(frozen=True)
class ConstantForcing:
    """Spatially constant body force; a gradient, so it only shifts the pressure."""

    value: tuple = (0.0, 0.0)

    def __call__(self, t, pts):
        out = np.empty((len(pts), 2))
        out[:, 0], out[:, 1] = self.value
        return out

    def to_dict(self):
        return {"kind": "constant", "value": list(self.value)}


@dataclass(frozen=True)
class VortexForcing:
    """Time-constant swirl ``a * curl (1 - |x-c|^2/R^2)_+^4`` supported in ``B(c, R)``."""

    center: tuple = (0.0, 0.0)
    radius: float = 0.5
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("vortex forcing radius must be positive")

    def __call__(self, t, pts):
        pts = np.asarray(pts, float)
        dx, dy = pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]
        R2 = self.radius ** 2
        s = np.clip(1.0 - (dx * dx + dy * dy) / R2, 0.0, None)
        g = -8.0 * self.amplitude * s ** 3 / R2  # d psi / d x = g dx
        return np.column_stack([g * dy, -g * dx])

    def to_dict(self):
        return {"kind": "vortex", "center": list(self.center), "radius": self.radius,
                "amplitude": self.amplitude}


def forcing_from_dict(d):
    """``[fx, fy]`` or ``{"kind": "constant"|"vortex", ...}``; ``None`` for zero force."""
    if isinstance(d, (list, tuple)):
        d = {"kind": "constant", "value": list(d)}
    kind = d.get("kind")
    if kind == "constant":
        v = tuple(float(x) for x in d.get("value", (0.0, 0.0)))
        if len(v) != 2:
            raise ValueError("constant forcing needs a 2-vector")
        return None if v == (0.0, 0.0) else ConstantForcing(v)
    if kind == "vortex":
        extra = set(d) - {"kind", "center", "radius", "amplitude"}
        if extra:
            raise ValueError(f"unknown vortex forcing keys {sorted(extra)}")
        c = tuple(float(x) for x in d.get("center", (0.0, 0.0)))
        return VortexForcing(c, float(d.get("radius", 0.5)), float(d.get("amplitude", 1.0)))
    raise ValueError(f"unknown forcing kind {kind!r}")


# --------------------------------------------------------------- ensemble

def solve_ensemble(md, v, rp, init, f, ensemble, threads=1, **kw):
    """Run one solve per configuration; failed members are dropped with a warning."""
    if not ensemble:
        raise ValueError("ensemble must be nonempty")

    def run(cfg):
        try:
            return solve_forward(md, v, rp, init, f, cfg, **kw)
        except (PicardError, RuntimeError) as exc:
            warnings.warn(f"ensemble member seed_id={cfg.seed_id} failed: {exc}")
            log.warning("ensemble member %s failed: %s", cfg.seed_id, exc)
            return None

    if threads > 1 and len(ensemble) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, ensemble))
    else:
        results = [run(c) for c in ensemble]
    ok = [r for r in results if r is not None]
    if not ok:
        raise RuntimeError("every ensemble member failed")
    return ok
