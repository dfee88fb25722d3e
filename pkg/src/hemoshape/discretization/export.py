"""Legacy ASCII VTK and CSV writers for mesh layers and nodal fields."""
from __future__ import annotations

import csv

import numpy as np

from .fem import p1_to_p2
from .mesh import Mesh

VTK_QUADRATIC_TRIANGLE = 22


def _fmt(x):
    return "%.17g" % x


def write_vtk(path, mesh: Mesh, velocity=None, pressure=None, scalars=None, title="layer"):
    """Write one layer as quadratic triangles with P2 point data.

    ``pressure`` is a P1 vertex field and is lifted to P2 nodes;
    ``scalars`` maps names to P2 nodal arrays.
    """
    nodes = mesh.p2_nodes
    cells = mesh.p2_dofs
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(nodes)} double"]
    lines += [f"{_fmt(x)} {_fmt(y)} 0" for x, y in nodes]
    lines.append(f"CELLS {len(cells)} {7 * len(cells)}")
    lines += ["6 " + " ".join(str(int(i)) for i in c) for c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(VTK_QUADRATIC_TRIANGLE)] * len(cells)
    data = []
    if velocity is not None:
        data.append("VECTORS velocity double")
        data += [f"{_fmt(u)} {_fmt(v)} 0" for u, v in np.asarray(velocity)]
    if pressure is not None:
        data.append("SCALARS pressure double 1")
        data.append("LOOKUP_TABLE default")
        data += [_fmt(p) for p in p1_to_p2(mesh, np.asarray(pressure))]
    for name, vals in (scalars or {}).items():
        data.append(f"SCALARS {name} double 1")
        data.append("LOOKUP_TABLE default")
        data += [_fmt(v) for v in np.asarray(vals)]
    if data:
        lines.append(f"POINT_DATA {len(nodes)}")
        lines += data
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk_points(path):
    """Points and named point arrays of a file written by :func:`write_vtk`."""
    with open(path) as fh:
        toks = fh.read().split("\n")
    i = 0
    out = {}
    while i < len(toks):
        line = toks[i]
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            out["points"] = np.array([[float(v) for v in toks[i + 1 + k].split()]
                                      for k in range(n)])
            i += n
        elif line.startswith("VECTORS"):
            name = line.split()[1]
            n = len(out["points"])
            out[name] = np.array([[float(v) for v in toks[i + 1 + k].split()] for k in range(n)])
            i += n
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            n = len(out["points"])
            out[name] = np.array([float(toks[i + 2 + k]) for k in range(n)])
            i += n + 1
        i += 1
    return out


def write_node_csv(path, mesh: Mesh, t, velocity=None, pressure=None):
    """Node table with columns ``t, node, x, y[, ux, uy][, p]`` on P2 nodes."""
    nodes = mesh.p2_nodes
    header = ["t", "node", "x", "y"]
    cols = [np.full(len(nodes), t), np.arange(len(nodes)), nodes[:, 0], nodes[:, 1]]
    if velocity is not None:
        header += ["ux", "uy"]
        cols += [velocity[:, 0], velocity[:, 1]]
    if pressure is not None:
        header.append("p")
        cols.append(p1_to_p2(mesh, np.asarray(pressure)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([int(row[1]) if k == 1 else _fmt(v) for k, v in enumerate(row)])
