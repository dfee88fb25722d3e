"""Per-layer discrete fields and space-time integration over a moving mesh."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import FEValues
from .mesh import Mesh, MovingMesh


@dataclass(eq=False)
class FlowState:
    """Velocity ``u``, homogenized velocity ``w = u - V`` and pressure on every layer.

    ``velocity_coeffs[i]`` and ``w_coeffs[i]`` are ``(n_p2, 2)`` arrays,
    ``pressure_coeffs[i]`` is ``(n_vertices,)``.
    """

    time_grid: np.ndarray
    velocity_coeffs: list
    pressure_coeffs: list
    w_coeffs: list
    info: dict = field(default_factory=dict)

    @property
    def n_layers(self):
        return len(self.time_grid)

    def to_npz(self, path):
        np.savez(path, time_grid=self.time_grid, velocity=np.stack(self.velocity_coeffs),
                 pressure=np.stack(self.pressure_coeffs), w=np.stack(self.w_coeffs))

    @classmethod
    def from_npz(cls, path):
        with np.load(path) as d:
            return cls(d["time_grid"], list(d["velocity"]), list(d["pressure"]), list(d["w"]))

    def equal(self, other) -> bool:
        """Bitwise equality of all stored numerics."""
        return (np.array_equal(self.time_grid, other.time_grid)
                and all(np.array_equal(a, b) for a, b in zip(self.velocity_coeffs,
                                                             other.velocity_coeffs))
                and all(np.array_equal(a, b) for a, b in zip(self.pressure_coeffs,
                                                             other.pressure_coeffs)))


@dataclass(eq=False)
class LayerView:
    """Quadrature-level view of one layer handed to integrands."""

    index: int
    t: float
    fe: FEValues
    u: np.ndarray | None

    @property
    def x(self):
        return self.fe.x

    def values(self):
        return self.fe.values(self.u)

    def gradients(self):
        return self.fe.gradients(self.u)


def trapezoid_weights(times):
    times = np.asarray(times, float)
    w = np.zeros(len(times))
    if len(times) == 1:
        return w
    dt = np.diff(times)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def layer_meshes(md) -> list[Mesh]:
    """Layer meshes of a MovingMesh, or a list of meshes passed through."""
    if isinstance(md, MovingMesh):
        return [md.layer(i) for i in range(md.layer_count)]
    return list(md)


def spacetime_integrate(md, state: FlowState | None, integrand, times=None, rule=None,
                        fe_layers=None):
    """Trapezoid-in-time, Gauss-in-space integral of ``integrand(view)``.

    Parameters
    ----------
    md : MovingMesh or sequence of Mesh
        Layers of the moving mesh.
    state : FlowState or None
        Fields handed to the integrand through ``LayerView.u``.
    integrand : callable
        Maps a :class:`LayerView` to values at quadrature points ``(nt, nq)``.

    Returns
    -------
    total, per_layer : float, ndarray
        ``per_layer[i]`` is the spatial integral over layer ``i``; ``total``
        applies the trapezoid weights.
    """
    if times is None:
        times = state.time_grid if state is not None else md.times
    times = np.asarray(times, float)
    if fe_layers is None:
        fe_layers = [FEValues.build(m, rule) for m in layer_meshes(md)]
    if len(fe_layers) != len(times):
        raise ValueError("layer count does not match the time grid")
    per_layer = np.empty(len(times))
    for i, (t, fe) in enumerate(zip(times, fe_layers)):
        u = None if state is None else state.velocity_coeffs[i]
        if u is not None and len(u) != fe.mesh.n_p2:
            raise ValueError(f"state does not match the mesh at layer {i}")
        vals = np.asarray(integrand(LayerView(i, float(t), fe, u)), float)
        per_layer[i] = fe.integrate(np.broadcast_to(vals, fe.w.shape))
    return float(trapezoid_weights(times) @ per_layer), per_layer
