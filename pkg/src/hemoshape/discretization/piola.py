"""Nodal Piola transforms between the reference domain and a time layer.

The forward map pulls a layer field back to the reference configuration,

    (P u)(x) = det(grad phi) (grad phi)^{-1} u(phi(x)),

and the inverse map pushes a reference field forward,
``(P^{-1} v)(y) = det(grad phi)^{-1} grad phi v(x)`` with ``y = phi(x)``.
Both act on P2 nodal values using the Jacobian sampled at each reference
node, so a round trip is the identity up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import FlowMap
from .fem import FEValues, p1_mass_matrix, p1_load
from .mesh import Mesh


@dataclass(eq=False)
class PiolaMap:
    flow: FlowMap
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in ("forward", "inverse"):
            raise ValueError(f"direction must be 'forward' or 'inverse', not {self.direction!r}")

    def inverse(self):
        return PiolaMap(self.flow, "inverse" if self.direction == "forward" else "forward")

    def jacobians(self, t):
        try:
            i = self.flow.index(t)
        except KeyError as exc:
            raise KeyError(f"missing Jacobian samples at t={t}") from exc
        return self.flow.jacobians[i]


def piola_apply(pmap: PiolaMap, field, t: float):
    """Apply the Piola map to nodal P2 values ``field`` of shape ``(n_p2, 2)``."""
    field = np.asarray(field, float)
    J = pmap.jacobians(t)
    if len(J) != len(field):
        raise ValueError(f"flow map sampled at {len(J)} nodes, field has {len(field)}")
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if pmap.direction == "forward":
        # det J J^{-1} = adj(J)
        adj = np.empty_like(J)
        adj[:, 0, 0] = J[:, 1, 1]
        adj[:, 1, 1] = J[:, 0, 0]
        adj[:, 0, 1] = -J[:, 0, 1]
        adj[:, 1, 0] = -J[:, 1, 0]
        return np.einsum("nij,nj->ni", adj, field)
    return np.einsum("nij,nj->ni", J, field) / det[:, None]


def weak_divergence(mesh: Mesh, field, fe: FEValues | None = None):
    """L2 norm of the P1 projection of ``div field``."""
    from scipy.sparse.linalg import spsolve

    fe = fe or FEValues.build(mesh)
    G = fe.gradients(field)
    b = p1_load(fe, G[..., 0, 0] + G[..., 1, 1])
    M = p1_mass_matrix(fe)
    d = spsolve(M.tocsc(), b)
    return float(np.sqrt(d @ (M @ d)))


def divergence_report(pmap: PiolaMap, reference: Mesh, layer: Mesh, field_layer, t):
    """Divergence norms of a layer field and of its Piola pull-back."""
    from .fem import divergence_l2

    pulled = piola_apply(pmap, field_layer, t)
    fe_ref = FEValues.build(reference)
    fe_lay = FEValues.build(layer)
    out = {
        "div_layer": divergence_l2(fe_lay, field_layer),
        "div_pulled": divergence_l2(fe_ref, pulled),
        "weak_div_layer": weak_divergence(layer, field_layer, fe_lay),
        "weak_div_pulled": weak_divergence(reference, pulled, fe_ref),
        "h": layer.h_max(),
    }
    out["ratio"] = out["div_pulled"] / max(out["div_layer"], 1e-300)
    return out
