import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surveyfusion.errors import MeshError, ProjectionError
from surveyfusion.mesh import (
    Mesh,
    build_mesh,
    fem_matrices,
    projection_matrix,
    read_mesh,
    regular_mesh,
    write_mesh,
)


@pytest.fixture(scope="module")
def scattered():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 50, size=(60, 2))
    return pts, build_mesh(pts, inner_max_edge=6.0, outer_extension=10.0)


def test_minimal_triangulation():
    mesh = build_mesh([(0, 0), (10, 0), (0, 10)], inner_max_edge=100.0)
    assert mesh.n_vertices == 3 and len(mesh.triangles) == 1
    assert mesh.boundary.all()


def test_collinear_rejected():
    with pytest.raises(MeshError):
        build_mesh([(0, 0), (1, 1), (2, 2), (3, 3)], inner_max_edge=1.0)
    with pytest.raises(MeshError):
        build_mesh([(0, 0), (1, 1)], inner_max_edge=1.0)


def test_refinement_increases_vertices(scattered):
    pts, coarse = scattered
    fine = build_mesh(pts, inner_max_edge=3.0, outer_extension=10.0)
    assert fine.n_vertices > coarse.n_vertices


def test_mesh_covers_data_and_is_nondegenerate(scattered):
    pts, mesh = scattered
    assert np.all(mesh.areas() > 0)
    assert mesh.contains(pts).all()
    hull_pts = mesh.vertices[mesh.boundary]
    # extension pushes the boundary away from the data
    d = np.min(np.hypot(*(hull_pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1)), axis=1)
    assert d.min() > 5.0


def test_north_sea_scale_mesh_near_399_nodes():
    # lon -4..9, lat 51..62 projected at 56.5N
    from surveyfusion.data_io import project_coordinates

    lon, lat = np.meshgrid(np.linspace(-4, 9, 14), np.linspace(51, 62, 12))
    x, y = project_coordinates(lon.ravel(), lat.ravel(), 56.5)
    mesh = build_mesh(np.column_stack([x, y]), inner_max_edge=60.0, outer_extension=150.0, outer_max_edge=120.0)
    assert abs(mesh.n_vertices - 399) / 399 < 0.15


def test_projection_vertex_centroid_edge():
    mesh = regular_mesh(0, 2, 0, 2, 1.0)
    A = projection_matrix(mesh, mesh.vertices).toarray()
    assert np.allclose(A, np.eye(mesh.n_vertices))
    t = mesh.triangles[0]
    centroid = mesh.vertices[t].mean(axis=0)
    row = projection_matrix(mesh, [centroid]).toarray()[0]
    assert np.allclose(row[t], 1 / 3) and row.sum() == pytest.approx(1.0)
    mid = mesh.vertices[t[:2]].mean(axis=0)
    row = projection_matrix(mesh, [mid]).toarray()[0]
    assert sorted(row[row > 0]) == pytest.approx([0.5, 0.5])


def test_projection_outside_hull():
    mesh = regular_mesh(0, 1, 0, 1, 0.5)
    with pytest.raises(ProjectionError, match="location 1"):
        projection_matrix(mesh, [(0.5, 0.5), (2.0, 0.5)])
    A, outside = projection_matrix(mesh, [(0.5, 0.5), (2.0, 0.5)], skip_outside=True)
    assert list(outside) == [1] and A[1].nnz == 0


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0.5, 49.5), st.floats(0.5, 49.5)), min_size=1, max_size=30),
    st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3),
)
def test_projection_rows_and_affine_reproduction(scattered_locs, a, b, c):
    mesh = _square_mesh()
    locs = np.array(scattered_locs)
    A = projection_matrix(mesh, locs)
    dense = A.toarray()
    assert np.all(dense >= 0) and np.all(dense <= 1)
    assert np.allclose(dense.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((dense > 0).sum(axis=1) <= 3)
    f = a + b * mesh.vertices[:, 0] + c * mesh.vertices[:, 1]
    assert np.allclose(A @ f, a + b * locs[:, 0] + c * locs[:, 1], atol=1e-10)


_MESH = {}


def _square_mesh():
    if "sq" not in _MESH:
        rng = np.random.default_rng(11)
        pts = np.vstack([rng.uniform(0, 50, (40, 2)), [[0, 0], [50, 0], [0, 50], [50, 50]]])
        _MESH["sq"] = build_mesh(pts, inner_max_edge=7.0, outer_extension=5.0)
    return _MESH["sq"]


def test_fem_single_right_triangle():
    mesh = Mesh(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 1, 2]]), np.ones(3, bool))
    fem = fem_matrices(mesh)
    assert fem.C.diagonal().sum() == pytest.approx(0.5)
    # hand assembly of grad phi_i . grad phi_j * area
    expected = 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])
    assert np.allclose(fem.G.toarray(), expected)


def test_fem_properties(scattered):
    _, mesh = scattered
    fem = fem_matrices(mesh)
    G = fem.G.toarray()
    assert np.all(fem.C.diagonal() > 0)
    assert np.allclose(G, G.T, atol=1e-14)
    assert np.allclose(G.sum(axis=1), 0, atol=1e-12)
    assert fem.C.diagonal().sum() == pytest.approx(mesh.areas().sum(), abs=1e-10)
    moved = Mesh(mesh.vertices + [123.4, -56.7], mesh.triangles, mesh.boundary)
    fem2 = fem_matrices(moved)
    assert np.allclose(fem2.C.diagonal(), fem.C.diagonal(), rtol=1e-9)
    assert np.allclose(fem2.G.toarray(), G, atol=1e-9)


def test_fem_rejects_degenerate():
    mesh = Mesh(np.array([[0.0, 0], [1, 0], [2, 0]]), np.array([[0, 1, 2]]), np.ones(3, bool))
    with pytest.raises(MeshError):
        fem_matrices(mesh)


def test_mesh_text_round_trip(tmp_path, scattered):
    _, mesh = scattered
    path = tmp_path / "mesh.txt"
    write_mesh(mesh, path)
    back = read_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.boundary, mesh.boundary)
