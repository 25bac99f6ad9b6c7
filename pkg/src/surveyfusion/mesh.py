"""Triangulations, piecewise-linear projection and P1 finite-element matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, QhullError
import shapely
from shapely import geometry as geom

from .errors import MeshError, ProjectionError

# barycentric coordinates below -BARY_TOL (relative) count as outside
BARY_TOL = 1e-9


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (M, 2) km
    triangles: np.ndarray  # (ntri, 3) vertex indices, counter-clockwise
    boundary: np.ndarray  # (M,) bool

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def hull(self) -> geom.Polygon:
        return geom.MultiPoint(self.vertices).convex_hull

    def contains(self, xy) -> np.ndarray:
        """Point-in-mesh test (closed triangles)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        tri, _ = locate(self, xy)
        return tri >= 0


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _from_triangles(vertices, triangles) -> Mesh:
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    p = vertices[triangles]
    area2 = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = area2 < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    # boundary edges appear in exactly one triangle
    edges = np.sort(np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = np.zeros(len(vertices), dtype=bool)
    boundary[uniq[counts == 1].ravel()] = True
    return Mesh(vertices, triangles, boundary)


def _subdivide_ring(coords, max_edge):
    pts = []
    for a, b in zip(coords[:-1], coords[1:]):
        n = max(1, math.ceil(np.hypot(*(b - a)) / max_edge - 1e-9))
        for k in range(n):
            pts.append(a + (b - a) * k / n)
    return np.array(pts)


def _triangular_lattice(bounds, h):
    x0, y0, x1, y1 = bounds
    dy = h * math.sqrt(3) / 2
    rows = np.arange(y0, y1 + dy, dy)
    pts = []
    for i, y in enumerate(rows):
        xs = np.arange(x0 + (0.5 * h if i % 2 else 0.0), x1 + h, h)
        pts.append(np.column_stack([xs, np.full(len(xs), y)]))
    return np.vstack(pts)


def _keep_inside(points, polygon, margin, exclude=None):
    """Lattice points inside ``polygon`` at least ``margin`` from its boundary."""
    if len(points) == 0:
        return points
    shrunk = polygon.buffer(-margin)
    if shrunk.is_empty:
        return points[:0]
    keep = shapely.contains_xy(shrunk, points[:, 0], points[:, 1])
    if exclude is not None:
        keep &= ~shapely.intersects_xy(exclude.buffer(margin), points[:, 0], points[:, 1])
    return points[keep]


def build_mesh(
    locations,
    inner_max_edge: float,
    outer_extension: float = 0.0,
    outer_max_edge: float | None = None,
    cutoff: float | None = None,
) -> Mesh:
    """Delaunay triangulation covering the convex hull of ``locations``.

    The hull boundary is subdivided to ``inner_max_edge`` and filled with a
    triangular lattice of that spacing. With ``outer_extension > 0`` a band of
    that width (spacing ``outer_max_edge``, default twice the inner spacing)
    is added around the hull to push the boundary away from the data. When
    ``cutoff`` is given, data locations themselves become vertices, thinned
    so that no two vertices are closer than ``cutoff``.
    """
    pts = np.unique(np.asarray(locations, dtype=float).reshape(-1, 2), axis=0)
    if inner_max_edge <= 0:
        raise MeshError("inner_max_edge must be positive")
    if outer_extension < 0:
        raise MeshError("outer_extension must be nonnegative")
    if len(pts) < 3:
        raise MeshError("at least 3 distinct locations are required")
    hull = geom.MultiPoint(pts).convex_hull
    if not isinstance(hull, geom.Polygon) or hull.area <= 1e-12 * hull.length ** 2:
        raise MeshError("locations are collinear; cannot triangulate")
    outer_max_edge = outer_max_edge or 2.0 * inner_max_edge

    ring = np.asarray(hull.exterior.coords)
    verts = [_subdivide_ring(ring, inner_max_edge)]
    lattice = _triangular_lattice(hull.bounds, inner_max_edge)
    verts.append(_keep_inside(lattice, hull, 0.5 * inner_max_edge))
    if cutoff is not None:
        verts.append(_thin(pts, np.vstack(verts), cutoff))
    if outer_extension > 0:
        outer = hull.buffer(outer_extension, quad_segs=4)
        outer = outer.convex_hull
        verts.append(_subdivide_ring(np.asarray(outer.exterior.coords), outer_max_edge))
        band = _triangular_lattice(outer.bounds, outer_max_edge)
        verts.append(_keep_inside(band, outer, 0.5 * outer_max_edge, exclude=hull))
    vertices = np.vstack([v for v in verts if len(v)])
    vertices = _dedupe(vertices, 1e-9 * inner_max_edge)
    try:
        tri = Delaunay(vertices)
    except QhullError as exc:
        raise MeshError(f"triangulation failed: {exc}") from None
    mesh = _from_triangles(vertices, tri.simplices)
    areas = mesh.areas()
    scale = inner_max_edge ** 2
    good = areas > 1e-10 * scale
    if not good.all():
        mesh = _from_triangles(vertices, mesh.triangles[good])
    return mesh


def _thin(candidates, existing, cutoff):
    from scipy.spatial import cKDTree

    kept = []
    tree = cKDTree(existing) if len(existing) else None
    for p in candidates:
        if tree is not None and tree.query(p)[0] < cutoff:
            continue
        if kept and np.min(np.hypot(*(np.array(kept) - p).T)) < cutoff:
            continue
        kept.append(p)
    return np.array(kept).reshape(-1, 2)


def _dedupe(points, tol):
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    pairs = tree.query_pairs(tol)
    if not pairs:
        return points
    drop = {max(i, j) for i, j in pairs}
    return points[[i for i in range(len(points)) if i not in drop]]


def regular_mesh(x0: float, x1: float, y0: float, y1: float, h: float) -> Mesh:
    """Structured mesh of right triangles with spacing ``h`` on a rectangle."""
    nx = int(round((x1 - x0) / h)) + 1
    ny = int(round((y1 - y0) / h)) + 1
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    # alternate the diagonal so the mesh has no preferred direction
    flip = ((np.arange(ny - 1)[:, None] + np.arange(nx - 1)[None, :]) % 2 == 1).ravel()
    t1 = np.where(flip[:, None], np.column_stack([a, b, d]), np.column_stack([a, b, c]))
    t2 = np.where(flip[:, None], np.column_stack([b, c, d]), np.column_stack([a, c, d]))
    return _from_triangles(vertices, np.vstack([t1, t2]))


def locate(mesh: Mesh, xy, chunk: int | None = None):
    """Containing triangle index (-1 when outside) and barycentric coordinates.

    Ties on shared edges go to the first triangle in mesh order.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    p = mesh.vertices[mesh.triangles]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    det = _cross(b - a, c - a)
    chunk = chunk or max(1, 2_000_000 // max(1, len(det)))
    tri = np.full(len(xy), -1, dtype=np.int64)
    bary = np.zeros((len(xy), 3))
    for start in range(0, len(xy), chunk):
        q = xy[start:start + chunk, None, :]
        l1 = _cross(q - a, c - a) / det
        l2 = _cross(b - a, q - a) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -BARY_TOL) & (l1 >= -BARY_TOL) & (l2 >= -BARY_TOL)
        hit = inside.any(axis=1)
        first = inside.argmax(axis=1)
        rows = np.flatnonzero(hit)
        k = first[rows]
        lam = np.column_stack([l0[rows, k], l1[rows, k], l2[rows, k]])
        lam = np.clip(lam, 0.0, None)
        lam /= lam.sum(axis=1, keepdims=True)
        tri[start + rows] = k
        bary[start + rows] = lam
    return tri, bary


def projection_matrix(mesh: Mesh, locations, skip_outside: bool = False):
    """Sparse n x M matrix of barycentric weights.

    With ``skip_outside`` the rows for locations outside the mesh are left
    empty and their indices are returned alongside the matrix instead of
    raising.
    """
    xy = np.atleast_2d(np.asarray(locations, dtype=float)).reshape(-1, 2)
    tri, bary = locate(mesh, xy)
    outside = np.flatnonzero(tri < 0)
    if len(outside) and not skip_outside:
        i = outside[0]
        raise ProjectionError(
            f"location {i} at ({xy[i, 0]:.6g}, {xy[i, 1]:.6g}) lies outside the mesh"
            + (f" ({len(outside)} outside in total)" if len(outside) > 1 else "")
        )
    inside = np.flatnonzero(tri >= 0)
    rows = np.repeat(inside, 3)
    cols = mesh.triangles[tri[inside]].ravel()
    vals = bary[inside].ravel()
    nz = vals > 0
    A = sp.csr_matrix((vals[nz], (rows[nz], cols[nz])), shape=(len(xy), mesh.n_vertices))
    if skip_outside:
        return A, outside
    return A


@dataclass(frozen=True)
class FemMatrices:
    C: sp.csc_matrix  # lumped (diagonal) mass
    G: sp.csc_matrix  # stiffness

    @property
    def c_diag(self) -> np.ndarray:
        return self.C.diagonal()

    def g_cinv_g(self) -> sp.csc_matrix:
        return (self.G @ sp.diags(1.0 / self.c_diag) @ self.G).tocsc()


def fem_matrices(mesh: Mesh) -> FemMatrices:
    p = mesh.vertices[mesh.triangles]
    area = 0.5 * _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    if np.any(area <= 0):
        bad = int(np.flatnonzero(area <= 0)[0])
        raise MeshError(f"triangle {bad} has non-positive area")
    M = mesh.n_vertices
    # edge vectors opposite each vertex; grad phi_i = rot(e_i) / (2 area)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    gl = np.einsum("tik,tjk->tij", e, e) / (4.0 * area[:, None, None])
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    G = sp.coo_matrix((gl.ravel(), (rows, cols)), shape=(M, M)).tocsc()
    G = ((G + G.T) * 0.5).tocsc()
    c = np.bincount(mesh.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=M)
    if np.any(c <= 0):
        raise MeshError("mesh has vertices not attached to any triangle")
    return FemMatrices(sp.diags(c).tocsc(), G)


def write_mesh(mesh: Mesh, path: str | Path) -> None:
    """Plain-text mesh: a vertex block followed by a triangle block."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"vertices {mesh.n_vertices}\n")
        for (x, y), b in zip(mesh.vertices, mesh.boundary):
            fh.write(f"{float(x)!r} {float(y)!r} {int(b)}\n")
        fh.write(f"triangles {len(mesh.triangles)}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path: str | Path) -> Mesh:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    try:
        if lines[0][0] != "vertices":
            raise MeshError("mesh file must start with a 'vertices' header")
        nv = int(lines[0][1])
        vertices = np.array([[float(a), float(b)] for a, b, _ in lines[1:1 + nv]])
        boundary = np.array([bool(int(f)) for _, _, f in lines[1:1 + nv]])
        head = lines[1 + nv]
        if head[0] != "triangles":
            raise MeshError("missing 'triangles' header")
        nt = int(head[1])
        triangles = np.array([[int(v) for v in ln] for ln in lines[2 + nv:2 + nv + nt]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file: {exc}") from None
    return Mesh(vertices, triangles.reshape(-1, 3), boundary)
