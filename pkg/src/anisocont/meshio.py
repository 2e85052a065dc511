"""Readers/writers: plain-text mesh format, nodal field files, legacy VTK."""
from __future__ import annotations

import numpy as np

from .mesh import SimplicialMesh, _derive_boundary

_FMT = "%.17g"

_VTK_CELL_TYPE = {2: 5, 3: 10}  # triangle, tetrahedron


def write_mesh_text(path, mesh):
    """Write a mesh in the plain-text format (node/element/facet tables)."""
    with open(path, "w") as f:
        f.write("anisocont-mesh 1\n")
        f.write(f"dim {mesh.dim}\n")
        f.write("box\n")
        for axis in range(mesh.dim):
            f.write(f"{_FMT % mesh.box[axis, 0]} {_FMT % mesh.box[axis, 1]}\n")
        f.write(f"nodes {mesh.num_nodes}\n")
        for p in mesh.nodes:
            f.write(" ".join(_FMT % c for c in p) + "\n")
        f.write(f"elements {mesh.num_elements}\n")
        for e in mesh.elements:
            f.write(" ".join(str(int(i)) for i in e) + "\n")
        f.write(f"facets {len(mesh.boundary_facets)}\n")
        for facet, seg in zip(mesh.boundary_facets, mesh.facet_segments):
            f.write(" ".join(str(int(i)) for i in facet) + f" {int(seg)}\n")


def read_mesh_text(path):
    """Read a mesh written by `write_mesh_text`."""
    with open(path) as f:
        tokens = f.read().split("\n")
    lines = [ln for ln in tokens if ln.strip()]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ValueError(f"{path}: truncated mesh file")
        line = lines[pos]
        pos += 1
        return line

    header = take().split()
    if header[:1] != ["anisocont-mesh"]:
        raise ValueError(f"{path}: not an anisocont mesh file")
    dim = int(take().split()[1])
    if take().split()[0] != "box":
        raise ValueError(f"{path}: missing box block")
    box = np.array([[float(v) for v in take().split()] for _ in range(dim)])
    n_nodes = int(take().split()[1])
    nodes = np.array([[float(v) for v in take().split()] for _ in range(n_nodes)])
    n_elems = int(take().split()[1])
    elements = np.array([[int(v) for v in take().split()] for _ in range(n_elems)],
                        dtype=np.int64)
    n_facets = int(take().split()[1])
    facets = np.zeros((n_facets, dim), dtype=np.int64)
    segs = np.zeros(n_facets, dtype=np.int64)
    for k in range(n_facets):
        vals = [int(v) for v in take().split()]
        facets[k] = vals[:dim]
        segs[k] = vals[dim]
    # node flags are derived, not stored
    _, _, flags = _derive_boundary(dim, nodes, elements, box)
    return SimplicialMesh(dim, nodes, elements, facets, segs, flags, box)


def write_field_text(path, u):
    with open(path, "w") as f:
        for v in np.asarray(u, dtype=float):
            f.write(_FMT % v + "\n")


def read_field_text(path):
    with open(path) as f:
        return np.array([float(ln) for ln in f if ln.strip()])


def write_vtk(path, mesh, point_data=None, title="anisocont output"):
    """Write mesh plus nodal scalar fields as a legacy ASCII VTK file.

    `point_data` maps field name -> nodal vector. 2D nodes are padded with
    z = 0.
    """
    point_data = point_data or {}
    nv = mesh.dim + 1
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write(title + "\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.num_nodes} double\n")
        for p in mesh.nodes:
            coords = list(p) + [0.0] * (3 - mesh.dim)
            f.write(" ".join(_FMT % c for c in coords) + "\n")
        f.write(f"CELLS {mesh.num_elements} {mesh.num_elements * (nv + 1)}\n")
        for e in mesh.elements:
            f.write(f"{nv} " + " ".join(str(int(i)) for i in e) + "\n")
        f.write(f"CELL_TYPES {mesh.num_elements}\n")
        ctype = _VTK_CELL_TYPE[mesh.dim]
        for _ in range(mesh.num_elements):
            f.write(f"{ctype}\n")
        if point_data:
            f.write(f"POINT_DATA {mesh.num_nodes}\n")
            for name, values in point_data.items():
                values = np.asarray(values, dtype=float)
                if values.shape != (mesh.num_nodes,):
                    raise ValueError(f"field '{name}' length does not match node count")
                f.write(f"SCALARS {name} double 1\n")
                f.write("LOOKUP_TABLE default\n")
                for v in values:
                    f.write(_FMT % v + "\n")
