"""Triangulation of the study region, finite-element matrices and projectors."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree

from .grid import GridSpec

__all__ = [
    "Mesh",
    "MeshError",
    "build_mesh",
    "fem_matrices",
    "projector",
    "barycentric",
    "write_mesh",
    "read_mesh",
]


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Planar triangulation in km.

    ``inner`` marks triangles belonging to the refined study-region part of
    the mesh; the rest form the extension band.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_extension: float = 0.0
    inner: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must have shape (n, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must have shape (m, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle references a missing vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.inner is None:
            object.__setattr__(self, "inner", np.ones(len(t), dtype=bool))
        if np.any(self.areas() <= 0):
            raise MeshError("degenerate or clockwise triangle in mesh")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def areas(self) -> np.ndarray:
        return self.signed_areas()

    def edge_lengths(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return np.stack(
            [
                np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
                np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
                np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
            ],
            axis=1,
        )

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


def _hex_lattice(xmin, xmax, ymin, ymax, spacing):
    dy = spacing * np.sqrt(3.0) / 2.0
    ys = np.arange(ymin, ymax + 0.5 * dy, dy)
    pts = []
    for i, y in enumerate(ys):
        off = 0.5 * spacing if i % 2 else 0.0
        xs = np.arange(xmin + off, xmax + 0.5 * spacing, spacing)
        pts.append(np.column_stack([xs, np.full_like(xs, y)]))
    return np.vstack(pts)


def _rectangle_boundary(xmin, xmax, ymin, ymax, spacing):
    nx = max(int(np.ceil((xmax - xmin) / spacing)), 1)
    ny = max(int(np.ceil((ymax - ymin) / spacing)), 1)
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    return np.vstack(
        [
            np.column_stack([xs, np.full_like(xs, ymin)]),
            np.column_stack([xs, np.full_like(xs, ymax)]),
            np.column_stack([np.full(ny - 1, xmin), ys[1:-1]]),
            np.column_stack([np.full(ny - 1, xmax), ys[1:-1]]),
        ]
    )


def _orient(points, tri):
    p = points[tri]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    tri = tri.copy()
    flip = cross < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri, np.abs(cross) / 2


def build_mesh(
    grid: GridSpec,
    max_edge_inner: float,
    max_edge_outer: float | None = None,
    margin: float = 75.0,
    max_refine: int = 60,
) -> Mesh:
    """Delaunay mesh over the active cells of ``grid`` plus an extension band.

    Triangles whose centroid lies within ``max_edge_inner`` of an active cell
    count as inner and have all edges ``<= max_edge_inner``; every other
    triangle has edges ``<= max_edge_outer``. Violations are removed by
    inserting longest-edge midpoints and re-triangulating.
    """
    if margin <= 0:
        raise MeshError("margin must be positive")
    if max_edge_inner <= 0:
        raise MeshError("max_edge_inner must be positive")
    if max_edge_outer is None:
        max_edge_outer = 2.0 * max_edge_inner
    if max_edge_outer < max_edge_inner:
        raise MeshError("max_edge_outer must be >= max_edge_inner")

    centers = grid.active_centers()
    half = 0.5 * grid.cell_size
    xmin, ymin = centers.min(axis=0) - half
    xmax, ymax = centers.max(axis=0) + half
    tree_cells = cKDTree(centers)
    reach = half * np.sqrt(2.0)

    def near_region(pts, dist):
        d, _ = tree_cells.query(pts)
        return d <= reach + dist

    s_in = max_edge_inner
    inner_pts = _hex_lattice(xmin - s_in, xmax + s_in, ymin - s_in, ymax + s_in, s_in)
    inner_pts = inner_pts[near_region(inner_pts, s_in)]

    s_out = max_edge_outer
    bx0, bx1, by0, by1 = xmin - margin, xmax + margin, ymin - margin, ymax + margin
    outer_pts = _hex_lattice(bx0, bx1, by0, by1, s_out)
    keep = (
        (outer_pts[:, 0] > bx0 + 0.25 * s_out)
        & (outer_pts[:, 0] < bx1 - 0.25 * s_out)
        & (outer_pts[:, 1] > by0 + 0.25 * s_out)
        & (outer_pts[:, 1] < by1 - 0.25 * s_out)
    )
    outer_pts = outer_pts[keep]
    d_inner, _ = cKDTree(inner_pts).query(outer_pts)
    outer_pts = outer_pts[d_inner > 0.75 * s_out]
    ring = _rectangle_boundary(bx0, bx1, by0, by1, s_out)
    points = np.vstack([inner_pts, outer_pts, ring])

    for _ in range(max_refine):
        tri = Delaunay(points).simplices
        tri, area = _orient(points, tri)
        good = area > 1e-9 * max_edge_inner**2
        tri = tri[good]
        mesh_pts = points[tri]
        centroid = mesh_pts.mean(axis=1)
        inner = near_region(centroid, max_edge_inner)
        lengths = np.stack(
            [
                np.linalg.norm(mesh_pts[:, 1] - mesh_pts[:, 2], axis=1),
                np.linalg.norm(mesh_pts[:, 2] - mesh_pts[:, 0], axis=1),
                np.linalg.norm(mesh_pts[:, 0] - mesh_pts[:, 1], axis=1),
            ],
            axis=1,
        )
        limit = np.where(inner, max_edge_inner, max_edge_outer) * (1 + 1e-9)
        bad = lengths.max(axis=1) > limit
        if not bad.any():
            break
        k = lengths[bad].argmax(axis=1)
        a = tri[bad][np.arange(k.size), (k + 1) % 3]
        b = tri[bad][np.arange(k.size), (k + 2) % 3]
        e = np.unique(np.sort(np.column_stack([a, b]), axis=1), axis=0)
        mids = 0.5 * (points[e[:, 0]] + points[e[:, 1]])
        points = np.vstack([points, mids])
    else:
        raise MeshError("edge-length refinement did not converge")

    used = np.unique(tri)
    remap = np.full(len(points), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    mesh = Mesh(points[used], remap[tri], boundary_extension=margin, inner=inner)
    if not np.all(_locate(mesh, centers) >= 0):
        raise MeshError("active cell centre outside the triangulation")
    return mesh


def fem_matrices(mesh: Mesh):
    """Lumped mass matrix ``C`` and P1 stiffness matrix ``G`` (both CSC)."""
    v = mesh.vertices
    t = mesh.triangles
    area = mesh.areas()
    n = mesh.n_vertices

    p = v[t]
    # edge opposite vertex i, rotated: grad(phi_i) = rot(e_i) / (2 area)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("tik,tjk->tij", e, e) / (4.0 * area)[:, None, None]

    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    G = sp.csc_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    c = np.bincount(t.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    C = sp.diags(c, format="csc")
    return C, G


def barycentric(mesh: Mesh, points: np.ndarray, tri_index: np.ndarray) -> np.ndarray:
    p = mesh.vertices[mesh.triangles[tri_index]]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    v0 = b - a
    v1 = c - a
    v2 = points - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    l1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def _locate(mesh: Mesh, points: np.ndarray, tol: float = 1e-10, k: int = 12) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    tree = cKDTree(centroids)
    found = np.full(len(points), -1, dtype=np.int64)
    kk = min(k, len(centroids))
    _, cand = tree.query(points, k=kk)
    cand = cand.reshape(len(points), kk)
    for j in range(kk):
        todo = found < 0
        if not todo.any():
            break
        idx = cand[todo, j]
        lam = barycentric(mesh, points[todo], idx)
        ok = lam.min(axis=1) >= -tol
        found[np.flatnonzero(todo)[ok]] = idx[ok]
    for i in np.flatnonzero(found < 0):
        lam = barycentric(mesh, np.repeat(points[i][None], len(mesh.triangles), 0),
                          np.arange(len(mesh.triangles)))
        hit = np.flatnonzero(lam.min(axis=1) >= -tol)
        if hit.size:
            found[i] = hit[0]
    return found


def projector(mesh: Mesh, points) -> sp.csr_matrix:
    """Observation matrix of barycentric weights, one row per point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri = _locate(mesh, points)
    outside = np.flatnonzero(tri < 0)
    if outside.size:
        i = outside[0]
        raise MeshError(
            f"point {i} at ({points[i, 0]:.6g}, {points[i, 1]:.6g}) lies outside the mesh"
            + (f" ({outside.size} points in total)" if outside.size > 1 else "")
        )
    lam = barycentric(mesh, points, tri)
    lam = np.clip(lam, 0.0, None)
    lam /= lam.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(len(points)), 3)
    A = sp.csr_matrix(
        (lam.ravel(), (rows, mesh.triangles[tri].ravel())),
        shape=(len(points), mesh.n_vertices),
    )
    A.eliminate_zeros()
    return A


def write_mesh(mesh: Mesh, vertices_path, triangles_path) -> None:
    pd.DataFrame({"x_km": mesh.vertices[:, 0], "y_km": mesh.vertices[:, 1]}).to_csv(
        vertices_path, index_label="vertex", float_format="%.17g"
    )
    pd.DataFrame(
        {"v0": mesh.triangles[:, 0], "v1": mesh.triangles[:, 1], "v2": mesh.triangles[:, 2],
         "inner": mesh.inner.astype(int)}
    ).to_csv(triangles_path, index_label="triangle")


def read_mesh(vertices_path, triangles_path, boundary_extension: float = 0.0) -> Mesh:
    v = pd.read_csv(Path(vertices_path), float_precision="round_trip").sort_values("vertex")
    t = pd.read_csv(Path(triangles_path), float_precision="round_trip").sort_values("triangle")
    inner = t["inner"].to_numpy(bool) if "inner" in t else None
    return Mesh(
        v[["x_km", "y_km"]].to_numpy(float),
        t[["v0", "v1", "v2"]].to_numpy(np.int64),
        boundary_extension=boundary_extension,
        inner=inner,
    )
