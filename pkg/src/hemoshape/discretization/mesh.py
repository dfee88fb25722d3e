"""Triangulations with P2 numbering, reference-mesh generation and mesh transport."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay

from ..geometry import DomainSpec, FlowMap, VelocityFieldSpec, integrate_flow_map


class MeshError(ValueError):
    pass


class TanglingError(RuntimeError):
    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


# local P2 node k >= 3 sits on the edge between these local vertices
P2_EDGES = ((0, 1), (1, 2), (2, 0))


@dataclass(eq=False)
class Mesh:
    """Straight-sided triangulation; P2 dofs are vertices followed by edges."""

    vertices: np.ndarray
    triangles: np.ndarray
    _topology: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self._topology is None:
            self._topology = _topology(self.triangles, len(self.vertices))

    # -- topology (shared between layers)
    @property
    def edges(self):
        return self._topology["edges"]

    @property
    def tri_edges(self):
        return self._topology["tri_edges"]

    @property
    def boundary_edges(self):
        return self._topology["boundary_edges"]

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_p2(self):
        return len(self.vertices) + len(self.edges)

    @cached_property
    def p2_dofs(self):
        """(nt, 6) global P2 indices in local order v0, v1, v2, e01, e12, e20."""
        return np.hstack([self.triangles, self.n_vertices + self.tri_edges])

    @cached_property
    def boundary_vertices(self):
        m = np.zeros(self.n_vertices, bool)
        m[self.edges[self.boundary_edges].ravel()] = True
        return m

    @cached_property
    def boundary_p2(self):
        m = np.zeros(self.n_p2, bool)
        m[: self.n_vertices] = self.boundary_vertices
        m[self.n_vertices + np.flatnonzero(self.boundary_edges)] = True
        return m

    @cached_property
    def p2_nodes(self):
        e = self.edges
        mid = 0.5 * (self.vertices[e[:, 0]] + self.vertices[e[:, 1]])
        return np.vstack([self.vertices, mid])

    def with_vertices(self, vertices):
        """Same connectivity, new vertex positions."""
        return Mesh(vertices, self.triangles, self._topology)

    # -- geometry
    def signed_areas(self):
        p = self.vertices[self.triangles]
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    def area(self):
        return float(self.signed_areas().sum())

    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    def h_max(self):
        return float(self.edge_lengths().max())

    def quality(self):
        """Radius ratio ``2 r_in / r_circ`` per triangle (1 for equilateral)."""
        p = self.vertices[self.triangles]
        la = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
        lb = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
        lc = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
        area = np.abs(self.signed_areas())
        s = 0.5 * (la + lb + lc)
        r_in = area / s
        r_circ = la * lb * lc / (4.0 * np.maximum(area, 1e-300))
        return 2.0 * r_in / r_circ

    def boundary_loop(self):
        """Boundary vertex indices in counter-clockwise order (single loop)."""
        be = self.edges[self.boundary_edges]
        # orient each boundary edge as it appears in its triangle (CCW)
        nxt = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                nxt.setdefault((a, b), True)
        succ = {}
        for a, b in be:
            if (a, b) in nxt:
                succ[a] = b
            else:
                succ[b] = a
        start = int(min(succ))
        loop = [start]
        while True:
            n = succ[loop[-1]]
            if n == start:
                break
            loop.append(int(n))
        return np.array(loop)


def _topology(tris, nv):
    loc = np.array(P2_EDGES)
    all_e = np.sort(tris[:, loc], axis=2).reshape(-1, 2)
    key = all_e[:, 0] * nv + all_e[:, 1]
    ukey, first, inv, counts = np.unique(key, return_index=True, return_inverse=True,
                                         return_counts=True)
    edges = all_e[first]
    return {"edges": edges, "tri_edges": inv.reshape(-1, 3), "boundary_edges": counts == 1}


def _orient(vertices, tris):
    p = vertices[tris]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    neg = (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]) < 0
    tris = tris.copy()
    tris[neg, 1], tris[neg, 2] = tris[neg, 2].copy(), tris[neg, 1].copy()
    return tris


def disk_template(n_rings: int):
    """Ring points of the unit disk (ring k has 6k points) and their triangulation."""
    rho = [0.0]
    theta = [0.0]
    for k in range(1, n_rings + 1):
        m = 6 * k
        # small deterministic twist avoids cocircular ties in the Delaunay step
        th = 2 * np.pi * (np.arange(m) + 0.5 * (k % 2)) / m
        rho.extend([k / n_rings] * m)
        theta.extend(th.tolist())
    rho = np.array(rho)
    theta = np.array(theta)
    pts = np.column_stack([rho * np.cos(theta), rho * np.sin(theta)])
    tri = Delaunay(pts).simplices
    tri = _orient(pts, tri)
    # drop slivers on the hull (flat triangles between outer ring points)
    p = pts[tri]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    area = 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    tri = tri[area > 1e-12 / n_rings ** 2]
    return rho, theta, tri


def build_reference_mesh(spec: DomainSpec, h_target: float, n_rings: int | None = None) -> Mesh:
    """Conforming triangulation of the radial polygon of ``spec``.

    A ring template of the unit disk is mapped radially by
    ``x = c + rho r(theta) (cos theta, sin theta)``. The number of rings is
    ``ceil(r_max / h_target)`` unless given, so that meshes of nearby shapes
    share their connectivity.
    """
    if not 0 < h_target < spec.r_min / 4:
        raise MeshError(f"h_target={h_target} must be in (0, r_min/4={spec.r_min / 4:.4g})")
    if n_rings is None:
        n_rings = int(math.ceil(spec.r_max / h_target - 1e-9))
    rho, theta, tri = disk_template(n_rings)
    r = spec.radius(theta)
    x = spec.center[0] + rho * r * np.cos(theta)
    y = spec.center[1] + rho * r * np.sin(theta)
    mesh = Mesh(np.column_stack([x, y]), tri)
    if np.any(mesh.signed_areas() <= 0):
        raise MeshError("degenerate polygon: radial map folds the template")
    return mesh


def rectangle_mesh(nx: int, ny: int | None = None, x0=0.0, x1=1.0, y0=0.0, y1=1.0) -> Mesh:
    """Structured triangulation of a rectangle with alternating diagonals."""
    ny = nx if ny is None else ny
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return Mesh(verts, np.array(tris))


def submesh(mesh: Mesh, keep: np.ndarray):
    """Mesh restricted to the triangles in ``keep`` and the vertex renumbering."""
    tris = mesh.triangles[keep]
    used = np.unique(tris)
    new = -np.ones(mesh.n_vertices, np.int64)
    new[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], new[tris]), used


# ---------------------------------------------------------------- transport

def check_layer(mesh: Mesh, layer=None, quality_floor=0.0):
    a = mesh.signed_areas()
    if np.any(a <= 0):
        raise TanglingError(f"tangled mesh at layer {layer}: {int((a <= 0).sum())} inverted "
                            f"triangles", layer)
    if quality_floor > 0:
        qmin = float(mesh.quality().min())
        if qmin < quality_floor:
            raise TanglingError(f"mesh quality {qmin:.3g} below floor {quality_floor} at "
                                f"layer {layer}", layer)


def transport_mesh(mesh: Mesh, flow: FlowMap, t: float, layer=None, quality_floor=0.0) -> Mesh:
    """Replace vertex positions by ``phi(t, x)``; connectivity unchanged."""
    nv = mesh.n_vertices
    if len(flow.points) < nv or not np.array_equal(flow.points[:nv], mesh.vertices):
        raise MeshError("flow map was not sampled at the mesh vertices")
    x, _ = flow.at(t)
    out = mesh.with_vertices(x[:nv])
    check_layer(out, layer if layer is not None else flow.index(t), quality_floor)
    return out


@dataclass(eq=False)
class MovingMesh:
    """Reference triangulation transported along the flow map at every time layer.

    The flow map is sampled at all P2 nodes of the reference mesh (vertices
    first), so Jacobians at edge midpoints are available for Piola maps.
    """

    reference_mesh: Mesh
    node_paths: FlowMap
    quality_floor: float = 0.05

    @classmethod
    def build(cls, mesh: Mesh, velocity: VelocityFieldSpec, times, dt_ode=1e-3,
              quality_floor=0.05):
        flow = integrate_flow_map(velocity, mesh.p2_nodes, times, dt_ode)
        mm = cls(mesh, flow, quality_floor)
        for i in range(len(times)):
            mm.layer(i)
        return mm

    @property
    def times(self):
        return self.node_paths.times

    @property
    def layer_count(self):
        return len(self.times)

    def layer(self, i) -> Mesh:
        nv = self.reference_mesh.n_vertices
        out = self.reference_mesh.with_vertices(self.node_paths.node_trajectories[i][:nv])
        check_layer(out, i, self.quality_floor)
        return out

    def mesh_velocity(self, i):
        """Vertex velocity ``(x^i - x^(i-1)) / dt`` of step ``i - 1 -> i``."""
        nv = self.reference_mesh.n_vertices
        tr = self.node_paths.node_trajectories
        return (tr[i][:nv] - tr[i - 1][:nv]) / (self.times[i] - self.times[i - 1])

    def jacobians(self, i):
        """Flow-map Jacobians at the reference P2 nodes for layer ``i``."""
        return self.node_paths.jacobians[i]
