import numpy as np

import anisocont as ac
from anisocont import meshio


def test_mesh_text_roundtrip(tmp_path, rect_mesh):
    path = tmp_path / "mesh.txt"
    meshio.write_mesh_text(path, rect_mesh)
    back = meshio.read_mesh_text(path)
    assert back.dim == rect_mesh.dim
    assert np.array_equal(back.nodes, rect_mesh.nodes)
    assert np.array_equal(back.elements, rect_mesh.elements)
    assert np.array_equal(back.boundary_facets, rect_mesh.boundary_facets)
    assert np.array_equal(back.facet_segments, rect_mesh.facet_segments)
    assert back.boundary_node_flags == rect_mesh.boundary_node_flags
    assert ac.validate(back).ok


def test_mesh_text_roundtrip_3d(tmp_path, box_mesh):
    path = tmp_path / "mesh3.txt"
    meshio.write_mesh_text(path, box_mesh)
    back = meshio.read_mesh_text(path)
    assert np.array_equal(back.nodes, box_mesh.nodes)
    assert np.array_equal(back.elements, box_mesh.elements)


def test_write_is_deterministic(tmp_path, square_mesh):
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    meshio.write_mesh_text(p1, square_mesh)
    back = meshio.read_mesh_text(p1)
    meshio.write_mesh_text(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_field_roundtrip(tmp_path):
    u = np.array([0.0, -1.5, np.pi, 1e-30])
    path = tmp_path / "u.txt"
    meshio.write_field_text(path, u)
    assert np.array_equal(meshio.read_field_text(path), u)


def test_vtk_structure(tmp_path, square_mesh):
    path = tmp_path / "mesh.vtk"
    u = np.linspace(0, 1, square_mesh.num_nodes)
    meshio.write_vtk(path, square_mesh, {"u": u})
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 2.0"
    assert "ASCII" in lines
    assert "DATASET UNSTRUCTURED_GRID" in lines
    assert f"POINTS {square_mesh.num_nodes} double" in lines
    assert f"CELL_TYPES {square_mesh.num_elements}" in lines
    assert f"POINT_DATA {square_mesh.num_nodes}" in lines
    assert "SCALARS u double 1" in lines
    # each point line has 3 coordinates even for 2D meshes
    start = lines.index(f"POINTS {square_mesh.num_nodes} double") + 1
    assert len(lines[start].split()) == 3


def test_vtk_cell_types(tmp_path, square_mesh, box_mesh):
    p2, p3 = tmp_path / "m2.vtk", tmp_path / "m3.vtk"
    meshio.write_vtk(p2, square_mesh)
    meshio.write_vtk(p3, box_mesh)
    assert "\n5\n" in p2.read_text()
    assert "\n10\n" in p3.read_text()
