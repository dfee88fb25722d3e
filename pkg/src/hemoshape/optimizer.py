"""Derivative-free search over the finite-dimensional admissible shapes.

The loop produces a computational minimizing sequence. Parameters are the
radial Fourier coefficients of the initial domain followed by the Bernstein
time coefficients of each stream-function bump of the driving field.
Admissibility violations are penalized rather than projected away, so the
objective is total and the geometry certificates stay authoritative.

Every evaluation is logged. Whenever a feasible value improves the record,
the Hausdorff distance of the complements and the sampled C^1 distance of
the driving fields to the previous best are logged as convergence
diagnostics of the sequence.

The existence theory minimizes over an infinite-dimensional admissible class.
A finite parametrization changes the problem: its minimizer need not
approximate the minimizer of the full class. That gap is not bridged here.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from .functionals import FunctionalSpec, evaluate
from .geometry import (AdmissibilityError, DomainSpec, HoldAll, VelocityFieldSpec,
                       domain_violation, field_distance_c1, hausdorff_distance)
from .rheology import HemolysisParams, RheologyParams

log = logging.getLogger(__name__)

SYNTHETIC = ("disk_area", "area_tracking")
SENTINEL = 1e30


class OptimizerError(RuntimeError):
    pass


@dataclass
class ParamLayout:
    """Split of the flat parameter vector and its box bounds."""

    n_radial: int
    n_bumps: int = 0
    n_time: int = 0
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if self.n_radial < 1 or self.n_radial % 2 == 0:
            raise ValueError("n_radial must be odd and positive: [r0, a1, b1, ...]")
        n = self.size
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError(f"bounds must have length {n}")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")

    @property
    def size(self):
        return self.n_radial + self.n_bumps * self.n_time

    def to_dict(self):
        return {"n_radial": self.n_radial, "n_bumps": self.n_bumps, "n_time": self.n_time,
                "lower": [_num(v) for v in self.lower], "upper": [_num(v) for v in self.upper]}

    @classmethod
    def from_dict(cls, d):
        n = d["n_radial"] + d.get("n_bumps", 0) * d.get("n_time", 0)
        lo = [float(v) for v in d.get("lower", [-math.inf] * n)]
        hi = [float(v) for v in d.get("upper", [math.inf] * n)]
        return cls(d["n_radial"], d.get("n_bumps", 0), d.get("n_time", 0), np.array(lo),
                   np.array(hi))


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, float).copy()
        if self.values.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {self.values.shape}")

    @property
    def domain_params(self):
        return self.values[:self.layout.n_radial]

    @property
    def velocity_params(self):
        L = self.layout
        return self.values[L.n_radial:].reshape(L.n_bumps, L.n_time)

    def box_violation(self):
        lo = np.maximum(self.layout.lower - self.values, 0.0)
        hi = np.maximum(self.values - self.layout.upper, 0.0)
        return float(np.sum(lo) + np.sum(hi))


@dataclass
class VelocityTemplate:
    """Fixed bump geometry of the driving field; the optimizer varies the amplitudes.

    With ``fixed_coeffs`` the amplitudes are frozen and an empty parameter
    block (``n_time = 0``) reuses them, so only the domain is searched.
    """

    bump_centers: tuple = ()
    bump_radii: tuple = ()
    bump_kinds: tuple | None = None
    plateau_radii: tuple | None = None
    c_V: float = 1.0
    fixed_coeffs: tuple | None = None

    def build(self, coeffs, hold_all):
        if np.size(coeffs) == 0 and self.fixed_coeffs is not None:
            coeffs = self.fixed_coeffs
        return VelocityFieldSpec(self.bump_centers, self.bump_radii,
                                 tuple(tuple(r) for r in coeffs), hold_all, self.c_V,
                                 self.bump_kinds, self.plateau_radii)

    def to_dict(self):
        n = len(self.bump_centers)
        return {"bump_centers": [list(c) for c in self.bump_centers],
                "bump_radii": list(self.bump_radii),
                "bump_kinds": list(self.bump_kinds or ("bump",) * n),
                "plateau_radii": list(self.plateau_radii or (None,) * n), "c_V": self.c_V,
                "fixed_coeffs": None if self.fixed_coeffs is None
                else [list(r) for r in self.fixed_coeffs]}

    @classmethod
    def from_dict(cls, d):
        fixed = d.get("fixed_coeffs")
        return cls(tuple(tuple(c) for c in d.get("bump_centers", [])),
                   tuple(d.get("bump_radii", [])),
                   tuple(d["bump_kinds"]) if d.get("bump_kinds") is not None else None,
                   tuple(d["plateau_radii"]) if d.get("plateau_radii") is not None else None,
                   float(d.get("c_V", 1.0)),
                   None if fixed is None else tuple(tuple(float(v) for v in r) for r in fixed))


def certified_scale(template: VelocityTemplate, coeffs, hold_all: HoldAll):
    """Largest factor ``s`` with ``s * coeffs`` certified at ``c_V``.

    The certificate bound is positively homogeneous of degree one in the
    coefficients, so ``s = c_V / bound(coeffs)``.
    """
    probe = VelocityFieldSpec(template.bump_centers, template.bump_radii,
                              tuple(tuple(r) for r in coeffs), hold_all, math.inf,
                              template.bump_kinds, template.plateau_radii)
    b = probe.c11_bound()
    return math.inf if b == 0 else template.c_V / b


@dataclass
class Problem:
    """Everything the objective needs besides the parameters.

    ``kind`` is a functional kind (``hemolysis_r``, ``dissipation``,
    ``tracking``) or one of the synthetic test kinds that bypass the solver:
    ``disk_area`` gives ``(area - pi)^2`` and ``area_tracking`` gives
    ``|area - target_area|``.
    """

    kind: str
    layout: ParamLayout
    hold_all: HoldAll = field(default_factory=HoldAll)
    template: VelocityTemplate = field(default_factory=VelocityTemplate)
    lip_bound: float = 0.5
    r_min: float | None = None
    margin: float = 1e-6
    target_area: float = math.pi
    rheology: RheologyParams | None = None
    hemolysis: HemolysisParams | None = None
    mesh_h: float = 0.15
    n_layers: int = 5
    ensemble: int = 1
    picard_tol: float = 1e-8
    forcing: object = None
    threads: int = 1

    def __post_init__(self):
        if self.kind not in SYNTHETIC + ("hemolysis_r", "dissipation", "tracking"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind not in SYNTHETIC and self.rheology is None:
            raise ValueError("solver-based objectives need rheology parameters")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")


@dataclass
class Decoded:
    domain: DomainSpec | None
    velocity: VelocityFieldSpec | None
    violation: float
    message: str = ""

    @property
    def feasible(self):
        return self.violation == 0.0 and self.domain is not None and self.velocity is not None


def decode(p: ParamVector, problem: Problem) -> Decoded:
    """Certified specs of ``p`` or a positive violation measure (never raises)."""
    v = p.box_violation()
    msgs = []
    if v > 0:
        msgs.append(f"box bounds exceeded by {v:.3e}")
    rc = p.domain_params
    dv = domain_violation(rc, (0.0, 0.0), problem.hold_all, problem.lip_bound, problem.r_min,
                          problem.margin)
    if not math.isfinite(dv):
        dv = 1e6
    if dv > 0:
        msgs.append(f"domain violation {dv:.3e}")
    v += dv
    domain = None
    if dv == 0:
        try:
            domain = DomainSpec(tuple(rc), (0.0, 0.0), problem.hold_all, problem.lip_bound,
                                problem.r_min, None, problem.margin)
        except AdmissibilityError as exc:
            v += max(exc.violation, 1e-12) if math.isfinite(exc.violation) else 1.0
            msgs.append(str(exc))
    velocity = None
    try:
        velocity = problem.template.build(p.velocity_params, problem.hold_all)
    except AdmissibilityError as exc:
        v += max(exc.violation, 1e-12) if math.isfinite(exc.violation) else 1.0
        msgs.append(str(exc))
    return Decoded(domain, velocity, float(v), "; ".join(msgs))


@dataclass
class ObjectiveResult:
    value: float  # value seen by the search (penalized if infeasible)
    feasible: bool
    functional: float | None  # unpenalized functional value when feasible
    violation: float
    ensemble_values: list = field(default_factory=list)
    message: str = ""


def _solve_value(dec: Decoded, problem: Problem):
    from .discretization.mesh import MovingMesh, build_reference_mesh
    from .solver import InitialData, SolverConfig, solve_ensemble

    T = problem.hold_all.T
    times = np.linspace(0.0, T, problem.n_layers)
    dt = float(times[1] - times[0])
    mesh = build_reference_mesh(dec.domain, problem.mesh_h)
    md = MovingMesh.build(mesh, dec.velocity, times)
    members = [SolverConfig(dt=dt, picard_tol=problem.picard_tol, seed_id=k)
               for k in range(problem.ensemble)]
    runs = solve_ensemble(md, dec.velocity, problem.rheology, InitialData(), problem.forcing,
                          members, threads=problem.threads, ledger=False)
    spec = FunctionalSpec(problem.kind, problem.hemolysis)
    fv = evaluate(spec, md, [s for s, _ in runs], problem.rheology, dec.velocity)
    return fv.value, fv.ensemble_values


PENALTY_DEFAULT = 1e3


def objective(p: ParamVector, problem: Problem, best_known: float | None = None,
              penalty: float = PENALTY_DEFAULT) -> ObjectiveResult:
    """Total objective: functional value, penalized value, or sentinel on solver failure.

    Infeasible parameters get ``best_known + penalty * violation`` (``best_known``
    counts as 0 before the first feasible value).
    """
    dec = decode(p, problem)
    base = 0.0 if best_known is None or not math.isfinite(best_known) else best_known
    if not dec.feasible:
        return ObjectiveResult(base + penalty * dec.violation, False, None, dec.violation,
                               message=dec.message)
    try:
        if problem.kind == "disk_area":
            val, ens = (dec.domain.area() - math.pi) ** 2, []
        elif problem.kind == "area_tracking":
            val, ens = abs(dec.domain.area() - problem.target_area), []
        else:
            val, ens = _solve_value(dec, problem)
    except Exception as exc:  # the objective must stay total
        log.warning("objective evaluation failed: %s", exc)
        return ObjectiveResult(SENTINEL, False, None, 0.0, message=f"evaluation failed: {exc}")
    if not math.isfinite(val):
        return ObjectiveResult(SENTINEL, False, None, 0.0, message="non-finite value")
    return ObjectiveResult(float(val), True, float(val), 0.0, list(ens))


@dataclass
class OptimizerConfig:
    """Search controls with the documented defaults (8 starts, scale 0.1, weight 1e3)."""

    x0: tuple
    budget: int = 200
    starts: int = 8
    scale: float = 0.1
    penalty: float = PENALTY_DEFAULT
    xtol: float = 1e-6
    ftol: float = 1e-12
    seed: int = 0
    max_restarts: int = 3

    def __post_init__(self):
        if self.starts < 1:
            raise ValueError("starts must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")

    def to_dict(self):
        return {"x0": list(self.x0), "budget": self.budget, "starts": self.starts,
                "scale": self.scale, "penalty": self.penalty, "xtol": self.xtol,
                "ftol": self.ftol, "seed": self.seed, "max_restarts": self.max_restarts}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["x0"] = tuple(float(v) for v in d["x0"])
        return cls(**d)


HISTORY_FIELDS = ("evaluation", "start", "value", "feasible", "functional", "violation",
                  "best_value", "hausdorff_to_previous_best", "c1_to_previous_best", "x")


@dataclass
class OptimizerState:
    """Record of the minimizing sequence; ``best_value`` never increases."""

    layout: ParamLayout
    best_x: list | None = None
    best_value: float = math.inf
    best_ensemble: list = field(default_factory=list)
    history: list = field(default_factory=list)
    evaluations: int = 0
    starts_done: int = 0

    def record(self, x, res: ObjectiveResult, start: int, problem: Problem):
        self.evaluations += 1
        hd = c1 = ""
        if res.feasible and res.functional < self.best_value:
            if self.best_x is not None:
                hd, c1 = _distances(self.best_x, x, problem)
            self.best_x = [float(v) for v in x]
            self.best_value = float(res.functional)
            self.best_ensemble = list(res.ensemble_values)
        self.history.append({
            "evaluation": self.evaluations, "start": start, "value": float(res.value),
            "feasible": bool(res.feasible),
            "functional": "" if res.functional is None else float(res.functional),
            "violation": float(res.violation),
            "best_value": float(self.best_value) if math.isfinite(self.best_value) else "inf",
            "hausdorff_to_previous_best": hd, "c1_to_previous_best": c1,
            "x": [float(v) for v in x]})

    def best_values(self):
        return np.array([float(h["best_value"]) for h in self.history])

    def is_monotone(self):
        b = self.best_values()
        return bool(np.all(np.diff(b) <= 0)) if len(b) > 1 else True

    def to_dict(self):
        return {"layout": self.layout.to_dict(), "best_x": self.best_x,
                "best_value": _num(self.best_value), "best_ensemble": self.best_ensemble,
                "history": self.history, "evaluations": self.evaluations,
                "starts_done": self.starts_done}

    @classmethod
    def from_dict(cls, d):
        return cls(ParamLayout.from_dict(d["layout"]), d.get("best_x"),
                   float(d.get("best_value", math.inf)), list(d.get("best_ensemble", [])),
                   list(d.get("history", [])), int(d.get("evaluations", 0)),
                   int(d.get("starts_done", 0)))

    def save(self, path):
        """Atomic JSON write (values in repr precision)."""
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def write_history_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_FIELDS)
            for h in self.history:
                row = []
                for k in HISTORY_FIELDS:
                    v = h[k]
                    if k == "x":
                        v = " ".join("%.17g" % c for c in v)
                    elif isinstance(v, float):
                        v = "%.17g" % v
                    row.append(v)
                w.writerow(row)


def _distances(x_old, x_new, problem: Problem):
    L = problem.layout
    a = decode(ParamVector(x_old, L), problem)
    b = decode(ParamVector(x_new, L), problem)
    try:
        hd = hausdorff_distance(a.domain, b.domain)
    except Exception as exc:  # diagnostics only
        log.warning("Hausdorff diagnostic failed: %s", exc)
        hd = ""
    c1 = field_distance_c1(a.velocity, b.velocity) if L.n_bumps else 0.0
    return hd, c1


def minimize(cfg: OptimizerConfig, problem: Problem, state: OptimizerState | None = None,
             checkpoint=None) -> OptimizerState:
    """Nelder-Mead with multistart and restarts under a global evaluation budget.

    Start 0 is ``cfg.x0``; later starts perturb it by seeded uniform offsets of
    relative size ``cfg.scale``. The search runs in coordinates scaled by the
    box span (or ``max(|x0|, 1)`` for unbounded entries); ``cfg.xtol`` is the
    simplex-diameter tolerance in those coordinates. Each start restarts from its own best point
    until a restart no longer improves it. With ``state`` the search resumes:
    the record and the budget counter carry over and remaining starts are
    taken from the recorded best point.

    Raises
    ------
    OptimizerError
        If the budget is smaller than the simplex size or no feasible point
        was found before it ran out.
    """
    L = problem.layout
    n = L.size
    if len(cfg.x0) != n:
        raise OptimizerError(f"x0 has {len(cfg.x0)} entries, the layout expects {n}")
    if cfg.budget < n + 1:
        raise OptimizerError(f"evaluation budget {cfg.budget} is smaller than the simplex "
                             f"size {n + 1}")
    state = state or OptimizerState(L)
    rng = np.random.default_rng(cfg.seed)
    x0 = np.asarray(cfg.x0, float)
    span = np.where(np.isfinite(L.upper - L.lower), L.upper - L.lower, np.maximum(np.abs(x0), 1.0))
    offsets = [np.zeros(n)] + [rng.uniform(-1, 1, n) * cfg.scale * span
                               for _ in range(cfg.starts - 1)]

    class Exhausted(Exception):
        pass

    def run_start(k, xs):
        def f(z):
            if state.evaluations >= cfg.budget:
                raise Exhausted
            x = xs + z * span
            best = state.best_value if math.isfinite(state.best_value) else None
            res = objective(ParamVector(x, L), problem, best, cfg.penalty)
            state.record(x, res, k, problem)
            if checkpoint is not None:
                state.save(checkpoint)
            return res.value

        simplex = np.vstack([np.zeros(n)] + [cfg.scale * np.eye(n)[i] for i in range(n)])
        scipy_minimize(f, np.zeros(n), method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": cfg.xtol,
                                "fatol": cfg.ftol,
                                "maxfev": max(cfg.budget - state.evaluations, 1)})

    first = state.starts_done
    resumed = bool(state.history) and state.best_x is not None
    for k in range(first, cfg.starts):
        if resumed and k == first:
            xs = np.asarray(state.best_x, float)  # continue the recorded sequence
        else:
            xs = x0 + offsets[k]
        try:
            prev = math.inf
            for _ in range(cfg.max_restarts + 1):
                run_start(k, xs)
                if not state.best_value < prev:
                    break
                prev = state.best_value
                xs = np.asarray(state.best_x)
        except Exhausted:
            break
        state.starts_done = k + 1
        if checkpoint is not None:
            state.save(checkpoint)
    if state.best_x is None:
        raise OptimizerError(f"budget of {cfg.budget} evaluations exhausted before any "
                             f"feasible point was found")
    return state
