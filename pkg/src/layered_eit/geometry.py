"""Disk meshes, pixel grids, and the binary set morphology behind layer peeling.

The forward PDE runs on a structured triangulation of a disk. The inversion
manipulates regions (conductivity layers, candidate test inclusions) as
unions of axis-aligned pixels, which keeps admissibility checks, connected
components, and single-pixel peeling finite and exactly testable.

Conventions
-----------
* Pixel masks are boolean arrays of shape ``(ny, nx)`` indexed ``[iy, ix]``.
  A pixel's flat id is ``iy * nx + ix`` (row-major); every "deterministic
  order" in this package is ascending flat id.
* Connectivity is 4-neighbour for regions and complements alike. Complement
  connectivity is judged on the full grid plus a virtual exterior node
  adjacent to every pixel on the grid frame, so a region is "admissible"
  exactly when its complement reaches the outside in one piece.
* Distances between sets are measured between pixel centers. Thresholds
  compare integer squared pixel offsets against ``(tau / h_px)**2`` so the
  result does not depend on floating-point square roots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

__all__ = [
    "Mesh",
    "MeshError",
    "PixelGrid",
    "PixelSet",
    "build_disk_mesh",
    "mark_gamma",
    "pixelize",
    "thin_tau",
    "outer_layer_tau",
    "dilate_px",
    "erode_px",
    "connected_components",
    "is_admissible",
    "peelable_pixels",
    "locate_points",
    "write_pgm",
    "write_mesh_text",
]

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_TWO_PI = 2.0 * math.pi


class MeshError(ValueError):
    """Mesh construction failed for the given parameters."""


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation of a disk with marked boundary arcs.

    Attributes
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array
        Positively oriented vertex index triples.
    boundary_edges : (B, 2) int array
        Vertex pairs on the circle, listed counterclockwise.
    boundary_angles : (B,) float array
        Midpoint angle of each boundary edge in [0, 2*pi).
    gamma_flags : (B,) bool array
        True where the edge belongs to the current-carrying arc set.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_angles: np.ndarray
    gamma_flags: np.ndarray
    radius: float
    target_h: float

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        p0, p1, p2 = (self.vertices[self.triangles[:, k]] for k in range(3))
        e1 = p1 - p0
        e2 = p2 - p0
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def triangle_centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def gamma_edges(self) -> np.ndarray:
        return self.boundary_edges[self.gamma_flags]

    def validate(self) -> None:
        """Raise MeshError unless the triangulation invariants hold."""
        if np.any(self.triangle_areas <= 0.0):
            raise MeshError("triangulation contains non-positive signed areas")
        tri = self.triangles
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("an edge is shared by more than two triangles")
        n_open = int(np.sum(counts == 1))
        if n_open != self.boundary_edges.shape[0]:
            raise MeshError(
                f"boundary edge count mismatch: {n_open} open edges in the "
                f"triangulation vs {self.boundary_edges.shape[0]} stored"
            )
        bverts = np.unique(self.boundary_edges)
        radii = np.hypot(*self.vertices[bverts].T)
        if np.max(np.abs(radii - self.radius)) > 1e-10:
            raise MeshError("boundary vertices drift off the domain circle")
        if not np.any(self.gamma_flags):
            raise MeshError("gamma flag set is empty")


def build_disk_mesh(radius: float, target_h: float) -> Mesh:
    """Build a structured fan triangulation of a disk.

    Vertices sit on ``n`` concentric rings, ring ``i`` carrying ``6*i``
    equispaced points, plus the center. Consecutive rings are stitched by an
    angular merge walk, which keeps every edge below ``1.5 * target_h``.
    The boundary arcs default to the full circle.

    Parameters
    ----------
    radius : float
        Disk radius, > 0.
    target_h : float
        Requested edge length, in (0, radius).
    """
    if radius <= 0.0:
        raise MeshError(f"radius must be positive, got {radius}")
    if not (0.0 < target_h < radius):
        raise MeshError(
            f"target_h must lie in (0, radius): target_h={target_h}, radius={radius}"
        )
    n_rings = max(1, int(math.ceil(radius / target_h - 1e-9)))
    if n_rings > 3000:
        raise MeshError(
            f"degenerate target_h: radius={radius}, target_h={target_h} "
            f"requests {n_rings} rings"
        )

    verts = [np.zeros((1, 2))]
    ring_start = [None, 1]
    for i in range(1, n_rings + 1):
        m = 6 * i
        r = radius * i / n_rings
        ang = _TWO_PI * np.arange(m) / m
        verts.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
        ring_start.append(ring_start[-1] + m)
    vertices = np.concatenate(verts)

    tris = [(0, 1 + k, 1 + (k + 1) % 6) for k in range(6)]
    for i in range(1, n_rings):
        tris.extend(_stitch_rings(ring_start[i], 6 * i, ring_start[i + 1], 6 * (i + 1)))
    triangles = np.asarray(tris, dtype=np.int64)

    m_out = 6 * n_rings
    s_out = ring_start[n_rings]
    b0 = s_out + np.arange(m_out)
    b1 = s_out + (np.arange(m_out) + 1) % m_out
    boundary_edges = np.column_stack([b0, b1]).astype(np.int64)
    boundary_angles = _TWO_PI * (np.arange(m_out) + 0.5) / m_out

    return Mesh(
        vertices=vertices,
        triangles=triangles,
        boundary_edges=boundary_edges,
        boundary_angles=boundary_angles,
        gamma_flags=np.ones(m_out, dtype=bool),
        radius=float(radius),
        target_h=float(target_h),
    )


def _stitch_rings(si: int, mi: int, so: int, mo: int) -> list[tuple[int, int, int]]:
    # Walk both rings by angle; at each step emit the triangle whose new
    # vertex comes first. Both choices are counterclockwise by construction.
    tris = []
    ia = ib = 0
    while ia < mi or ib < mo:
        a_next = (ia + 1) / mi
        b_next = (ib + 1) / mo
        if ib >= mo or (ia < mi and a_next <= b_next):
            tris.append((si + ia % mi, so + ib % mo, si + (ia + 1) % mi))
            ia += 1
        else:
            tris.append((si + ia % mi, so + ib % mo, so + (ib + 1) % mo))
            ib += 1
    return tris


def mark_gamma(mesh: Mesh, arcs: list[tuple[float, float]]) -> Mesh:
    """Return a copy of the mesh with gamma flags set on the given arcs.

    An edge is flagged when its midpoint angle falls inside any interval
    ``(a0, a1)``, taken modulo 2*pi; an interval spanning >= 2*pi flags the
    whole circle.
    """
    if not arcs:
        raise ValueError("arcs must be nonempty")
    flags = np.zeros(mesh.boundary_angles.shape[0], dtype=bool)
    for a0, a1 in arcs:
        span = a1 - a0
        if span <= 0.0:
            raise ValueError(f"degenerate arc ({a0}, {a1})")
        if span >= _TWO_PI:
            flags[:] = True
            continue
        rel = np.mod(mesh.boundary_angles - a0, _TWO_PI)
        flags |= rel <= span
    if not np.any(flags):
        raise ValueError(
            f"gamma empty at this resolution: no boundary edge midpoint falls "
            f"in {arcs} with {flags.shape[0]} boundary edges"
        )
    return replace(mesh, gamma_flags=flags)


@dataclass(frozen=True)
class PixelGrid:
    """Axis-aligned pixel grid covering the bounding box of the disk.

    ``inside`` marks pixels whose center lies in the domain at distance at
    least ``h_px`` from the boundary circle; only those pixels may ever be
    members of a :class:`PixelSet`. ``tri_pixel`` assigns each mesh triangle
    to the flat id of the pixel containing its centroid, or -1 when that
    pixel is outside the margin.
    """

    origin: tuple[float, float]
    h_px: float
    nx: int
    ny: int
    inside: np.ndarray
    tri_pixel: np.ndarray
    mesh: Mesh
    radius: float

    @property
    def inside_count(self) -> int:
        return int(np.count_nonzero(self.inside))

    def same_geometry(self, other: "PixelGrid") -> bool:
        return (
            self.nx == other.nx
            and self.ny == other.ny
            and self.origin == other.origin
            and self.h_px == other.h_px
        )

    def center_coords(self, flat_ids: np.ndarray) -> np.ndarray:
        iy, ix = np.divmod(np.asarray(flat_ids, dtype=np.int64), self.nx)
        x = self.origin[0] + (ix + 0.5) * self.h_px
        y = self.origin[1] + (iy + 0.5) * self.h_px
        return np.column_stack([x, y])

    def pixel_of_points(self, pts: np.ndarray) -> np.ndarray:
        """Flat pixel id containing each point; -1 outside the grid box."""
        pts = np.asarray(pts, dtype=float)
        ix = np.floor((pts[:, 0] - self.origin[0]) / self.h_px).astype(np.int64)
        iy = np.floor((pts[:, 1] - self.origin[1]) / self.h_px).astype(np.int64)
        ok = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        out = np.where(ok, iy * self.nx + ix, -1)
        return out

    def empty_set(self) -> "PixelSet":
        return PixelSet(self, np.zeros((self.ny, self.nx), dtype=bool))

    def inside_set(self) -> "PixelSet":
        return PixelSet(self, self.inside.copy())


def pixelize(mesh: Mesh, h_px: float) -> PixelGrid:
    """Build the pixel grid tied to a mesh.

    Triangles are binned by centroid; a triangle whose centroid pixel is not
    an inside pixel is assigned to the outside margin (-1).
    """
    radius = mesh.radius
    if not (0.0 < h_px < radius):
        raise ValueError(f"h_px must lie in (0, radius): h_px={h_px}, radius={radius}")
    n = int(math.ceil(2.0 * radius / h_px - 1e-9))
    origin = (-radius, -radius)
    cx = origin[0] + (np.arange(n) + 0.5) * h_px
    cy = origin[1] + (np.arange(n) + 0.5) * h_px
    xx, yy = np.meshgrid(cx, cy)
    inside = xx * xx + yy * yy <= (radius - h_px) ** 2

    cent = mesh.triangle_centroids
    ix = np.floor((cent[:, 0] - origin[0]) / h_px).astype(np.int64)
    iy = np.floor((cent[:, 1] - origin[1]) / h_px).astype(np.int64)
    flat = iy * n + ix
    tri_pixel = np.where(inside.ravel()[flat], flat, -1)

    return PixelGrid(
        origin=origin,
        h_px=float(h_px),
        nx=n,
        ny=n,
        inside=inside,
        tri_pixel=tri_pixel,
        mesh=mesh,
        radius=float(radius),
    )


@dataclass(frozen=True)
class PixelSet:
    """Immutable set of inside pixels on a grid."""

    grid: PixelGrid
    mask: np.ndarray

    def __post_init__(self):
        if self.mask.shape != (self.grid.ny, self.grid.nx):
            raise ValueError("mask shape does not match the grid")
        if np.any(self.mask & ~self.grid.inside):
            raise ValueError("pixel set escapes the inside mask of its grid")

    @classmethod
    def from_ids(cls, grid: PixelGrid, flat_ids) -> "PixelSet":
        mask = np.zeros(grid.ny * grid.nx, dtype=bool)
        mask[np.asarray(flat_ids, dtype=np.int64)] = True
        return cls(grid, mask.reshape(grid.ny, grid.nx))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def ids(self) -> np.ndarray:
        return np.flatnonzero(self.mask.ravel())

    def center_coords(self) -> np.ndarray:
        return self.grid.center_coords(self.ids())

    def _check(self, other: "PixelSet") -> None:
        if not self.grid.same_geometry(other.grid):
            raise ValueError("pixel sets live on grids with different geometry")

    def union(self, other: "PixelSet") -> "PixelSet":
        self._check(other)
        return PixelSet(self.grid, self.mask | other.mask)

    def intersection(self, other: "PixelSet") -> "PixelSet":
        self._check(other)
        return PixelSet(self.grid, self.mask & other.mask)

    def difference(self, other: "PixelSet") -> "PixelSet":
        self._check(other)
        return PixelSet(self.grid, self.mask & ~other.mask)

    __or__ = union
    __and__ = intersection
    __sub__ = difference

    def is_subset_of(self, other: "PixelSet") -> bool:
        self._check(other)
        return not np.any(self.mask & ~other.mask)

    def equals(self, other: "PixelSet") -> bool:
        self._check(other)
        return bool(np.array_equal(self.mask, other.mask))

    def triangle_mask(self) -> np.ndarray:
        """Boolean mask over mesh triangles whose centroid pixel is a member."""
        tp = self.grid.tri_pixel
        out = np.zeros(tp.shape[0], dtype=bool)
        ok = tp >= 0
        out[ok] = self.mask.ravel()[tp[ok]]
        return out


def _squared_pixel_distance_to_complement(mask: np.ndarray) -> np.ndarray:
    """Integer squared center distance from each member to the complement.

    Uses the exact Euclidean distance transform and recovers squared offsets
    from the nearest-background indices, so threshold comparisons stay exact.
    """
    if not mask.any():
        return np.zeros_like(mask, dtype=np.int64)
    _, (ni, nj) = ndimage.distance_transform_edt(mask, return_indices=True)
    ii, jj = np.indices(mask.shape)
    di = ii - ni
    dj = jj - nj
    return (di * di + dj * dj).astype(np.int64)


def thin_tau(region: PixelSet, tau: float) -> PixelSet:
    """Erode a region: keep pixels at center distance >= tau from outside."""
    if tau < 0.0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    if tau == 0.0 or region.count == 0:
        return region
    h = region.grid.h_px
    d2 = _squared_pixel_distance_to_complement(region.mask)
    keep = region.mask & (d2 * (h * h) >= tau * tau)
    return PixelSet(region.grid, keep)


def outer_layer_tau(region: PixelSet, tau: float) -> PixelSet:
    """Complement of the erosion inside the region; partitions the region."""
    return region.difference(thin_tau(region, tau))


def dilate_px(region: PixelSet, steps: int) -> PixelSet:
    """Grow by 4-neighbour steps, clipped to the inside pixels."""
    if steps <= 0:
        return region
    grown = ndimage.binary_dilation(region.mask, structure=_FOUR_CONN,
                                    iterations=steps)
    return PixelSet(region.grid, grown & region.grid.inside)


def erode_px(region: PixelSet, steps: int) -> PixelSet:
    """Shrink by 4-neighbour steps."""
    if steps <= 0:
        return region
    shrunk = ndimage.binary_erosion(region.mask, structure=_FOUR_CONN,
                                    iterations=steps, border_value=0)
    return PixelSet(region.grid, shrunk & region.mask)


def connected_components(region: PixelSet) -> list[PixelSet]:
    """Split into maximal 4-connected components, ordered by smallest member."""
    labels, n = ndimage.label(region.mask, structure=_FOUR_CONN)
    if n == 0:
        return []
    flat = labels.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    # first occurrence of each label in flat order
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable") + 1
    return [PixelSet(region.grid, labels == lab) for lab in order]


def _complement_connected(mask: np.ndarray) -> bool:
    comp = ~mask
    labels, n = ndimage.label(comp, structure=_FOUR_CONN)
    if n == 0:
        return True
    frame = np.zeros(mask.shape, dtype=bool)
    frame[0, :] = frame[-1, :] = True
    frame[:, 0] = frame[:, -1] = True
    touching = np.unique(labels[frame & comp])
    return len(touching[touching > 0]) == n


def is_admissible(candidate: PixelSet, parent: PixelSet) -> bool:
    """True when candidate is inside parent and its complement is connected.

    The complement is taken over the full grid together with a virtual
    exterior node attached to the grid frame, so any enclosed hole makes the
    candidate inadmissible.
    """
    if not candidate.grid.same_geometry(parent.grid):
        raise ValueError("candidate and parent live on grids with different geometry")
    if not candidate.is_subset_of(parent):
        return False
    return _complement_connected(candidate.mask)


def peelable_pixels(candidate: PixelSet) -> np.ndarray:
    """Flat ids of member pixels whose removal keeps the complement connected.

    For an admissible candidate these are exactly the members 4-adjacent to
    the current complement (the grid frame counts as complement via the
    virtual exterior node). Returned in ascending flat id order.
    """
    padded = np.pad(~candidate.mask, 1, constant_values=True)
    adj = (
        padded[:-2, 1:-1]
        | padded[2:, 1:-1]
        | padded[1:-1, :-2]
        | padded[1:-1, 2:]
    )
    return np.flatnonzero((candidate.mask & adj).ravel())


def locate_points(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Containing triangle index for each point, resolved deterministically.

    Candidate triangles come from a KD-tree over centroids; among candidates
    containing the point (barycentric tolerance 1e-12) the smallest triangle
    index wins. Raises if a point lies in no triangle.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tree = cKDTree(mesh.triangle_centroids)
    verts = mesh.vertices
    tris = mesh.triangles
    out = np.full(points.shape[0], -1, dtype=np.int64)
    for k_cand in (8, 64, 512):
        todo = np.flatnonzero(out < 0)
        if todo.size == 0:
            break
        k = min(k_cand, mesh.n_triangles)
        _, cand = tree.query(points[todo], k=k)
        cand = np.atleast_2d(cand)
        for row, pt_idx in enumerate(todo):
            q = points[pt_idx]
            best = -1
            for t in cand[row]:
                p0, p1, p2 = verts[tris[t]]
                det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
                w1 = ((q[0] - p0[0]) * (p2[1] - p0[1]) - (q[1] - p0[1]) * (p2[0] - p0[0])) / det
                w2 = ((p1[0] - p0[0]) * (q[1] - p0[1]) - (p1[1] - p0[1]) * (q[0] - p0[0])) / det
                if w1 >= -1e-12 and w2 >= -1e-12 and w1 + w2 <= 1.0 + 1e-12:
                    if best < 0 or t < best:
                        best = t
            out[pt_idx] = best
    if np.any(out < 0):
        bad = points[np.flatnonzero(out < 0)[0]]
        raise RuntimeError(f"point {bad} lies in no mesh triangle")
    return out


def write_pgm(region: PixelSet, path) -> None:
    """Export a pixel set as binary PGM (P5): 255 member, 0 outside.

    Rows are written top to bottom, i.e. the highest-y pixel row first.
    """
    img = np.where(region.mask[::-1, :], 255, 0).astype(np.uint8)
    header = f"P5\n{region.grid.nx} {region.grid.ny}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.tobytes())


def write_mesh_text(mesh: Mesh, path) -> None:
    """Plain-text mesh listing: count header, then 'x y' and 'i j k' lines."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")
