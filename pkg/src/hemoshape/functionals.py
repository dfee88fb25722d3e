"""Shape functionals evaluated on solved flow states.

Every shipped kind integrates an absolute power or a square, so values are
nonnegative by construction. New kinds must also be weakly lower
semicontinuous in the velocity for the existence theory to apply; that is
an obligation on whoever adds the kind and is not checked here.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .discretization.fem import FEValues, sym
from .discretization.mesh import MovingMesh
from .discretization.state import FlowState, spacetime_integrate
from .rheology import (HemolysisParams, ParameterError, RheologyParams, frobenius,
                       hemolysis_window, stress)

KINDS = ("hemolysis_r", "dissipation", "tracking")


class FunctionalError(ValueError):
    pass


@dataclass(frozen=True)
class FunctionalSpec:
    """Which functional to evaluate and its parameters.

    ``target_field`` (tracking only) is a callable ``(t, pts) -> (N, 2)``.
    """

    kind: str
    hp: HemolysisParams | None = None
    target_field: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FunctionalError(f"unknown functional kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "hemolysis_r" and self.hp is None:
            raise FunctionalError("hemolysis_r needs HemolysisParams")
        if self.kind == "tracking" and self.target_field is None:
            raise FunctionalError("tracking needs a target field")

    def to_dict(self):
        d = {"kind": self.kind}
        if self.hp is not None:
            d["hemolysis"] = self.hp.to_dict()
        return d


@dataclass
class FunctionalValue:
    value: float
    ensemble_values: list
    breakdown: np.ndarray  # per-layer spatial integrals of the minimizing member
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if any(v < 0 for v in self.ensemble_values) or self.value < 0:
            raise FunctionalError("negative functional value")

    def to_dict(self):
        return {"value": self.value, "ensemble_values": list(self.ensemble_values),
                "spread": (max(self.ensemble_values) - min(self.ensemble_values))
                if self.ensemble_values else 0.0}

    def write_breakdown_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "t", "integral"])
            for i, (t, v) in enumerate(zip(self.times, self.breakdown)):
                w.writerow([i, "%.17g" % t, "%.17g" % v])


def validate_spec(spec: FunctionalSpec, rp: RheologyParams):
    """Check ``alpha <= q'`` and ``1 <= r <= q'/alpha``; return the window of ``r``."""
    if spec.kind != "hemolysis_r":
        return None
    hp = spec.hp
    try:
        lo, hi = hemolysis_window(rp.q, hp.alpha)
    except ParameterError as exc:
        raise FunctionalError(f"violated alpha <= q': {exc}") from exc
    if not lo <= hp.r <= hi * (1 + 1e-12):
        raise FunctionalError(f"violated 1 <= r <= q'/alpha: r={hp.r} outside the window "
                              f"[1, {hi:.6g}] for q={rp.q}, alpha={hp.alpha}")
    return lo, hi


def _strain(view, v_field, w):
    """Strain rate ``D u`` at quadrature points: ``D w_h + D V`` or ``D u_h``."""
    if v_field is None or w is None:
        return sym(view.fe.gradients(view.u))
    GV = v_field.grad(view.t, view.fe.x.reshape(-1, 2)).reshape(view.fe.x.shape[:2] + (2, 2))
    return sym(view.fe.gradients(w) + GV)


def _kernel(spec: FunctionalSpec, rp: RheologyParams, v_field, state: FlowState):
    def integrand(view):
        w = state.w_coeffs[view.index] if state.w_coeffs else None
        if spec.kind == "tracking":
            u = view.values()
            if v_field is not None and w is not None:
                u = view.fe.values(w) + v_field.velocity(
                    view.t, view.fe.x.reshape(-1, 2)).reshape(view.fe.x.shape)
            tgt = np.asarray(spec.target_field(view.t, view.fe.x.reshape(-1, 2)))
            return np.sum((u - tgt.reshape(u.shape)) ** 2, axis=-1)
        D = _strain(view, v_field, w)
        S = stress(D, rp, check=False)
        if spec.kind == "dissipation":
            return np.einsum("tqij,tqij->tq", S, D)
        hp = spec.hp
        h = hp.c_h * frobenius(S) ** hp.alpha * view.t ** hp.beta
        return np.abs(h) ** hp.r
    return integrand


def evaluate(spec: FunctionalSpec, md, states, rp: RheologyParams, v_field=None,
             fe_layers=None) -> FunctionalValue:
    """Space-time integral of the kernel of ``spec`` for each state; keep the minimum.

    Parameters
    ----------
    md : MovingMesh or list of meshes
    states : list of FlowState
        Ensemble members on the same moving mesh.
    v_field : VelocityFieldSpec, optional
        When given, strain rates use ``D w_h + D V`` with ``V`` exact at the
        quadrature points; otherwise ``D u_h``.
    """
    if not states:
        raise FunctionalError("no states to evaluate")
    validate_spec(spec, rp)
    if fe_layers is None:
        layers = [md.layer(i) for i in range(md.layer_count)] if isinstance(md, MovingMesh) \
            else list(md)
        fe_layers = [FEValues.build(m) for m in layers]
    values, breakdowns = [], []
    for st in states:
        if len(st.velocity_coeffs) != len(fe_layers):
            raise FunctionalError("state and moving mesh have different layer counts")
        if any(len(u) != fe.mesh.n_p2 for u, fe in zip(st.velocity_coeffs, fe_layers)):
            raise FunctionalError("state does not live on this moving mesh")
        total, per = spacetime_integrate(None, st, _kernel(spec, rp, v_field, st),
                                         times=st.time_grid, fe_layers=fe_layers)
        if not math.isfinite(total):
            raise FunctionalError("non-finite functional value")
        values.append(total)
        breakdowns.append(per)
    best = int(np.argmin(values))
    return FunctionalValue(float(values[best]), [float(v) for v in values], breakdowns[best],
                           np.asarray(states[best].time_grid))
