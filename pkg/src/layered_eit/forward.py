"""P1 finite elements for the zero-flux conductivity equation on the disk.

The forward map takes a mean-free current density on the marked boundary
arcs and returns the resulting voltage trace there. Discretely everything
is an M x M Galerkin matrix over an orthonormal basis of mean-free
piecewise-linear boundary functions:

* the current-to-voltage matrix is assembled through the interior energy
  form, which makes it exactly symmetric and positive definite;
* its derivative with respect to the conductivity, restricted to a region,
  is the (negated) gradient cross-energy of the stored potentials over the
  region's triangles.

One sparse LU factorization is built per conductivity field and reused for
all right-hand sides; the pure-Neumann nullspace is removed by a single
boundary-mean constraint row.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh, PixelSet

__all__ = [
    "SolveFailure",
    "ConductivityField",
    "BoundaryBasis",
    "Potential",
    "NdMatrix",
    "NdSolver",
    "build_basis",
    "solve",
    "assemble_nd",
    "assemble_frechet",
    "project_nd",
    "nd_to_csv",
]


class SolveFailure(RuntimeError):
    """The forward linear system could not be solved to tolerance."""


@dataclass(frozen=True)
class ConductivityField:
    """Per-triangle positive conductivity with declared bounds."""

    mesh: Mesh
    values: np.ndarray
    beta_lower: float
    beta_upper: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.mesh.n_triangles,):
            raise ValueError("values must carry one conductivity per triangle")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
            raise ValueError("conductivity must be finite and strictly positive")
        lo, hi = float(vals.min()), float(vals.max())
        if lo < self.beta_lower - 1e-12 or hi > self.beta_upper + 1e-12:
            raise ValueError(
                f"conductivity range [{lo}, {hi}] escapes declared bounds "
                f"[{self.beta_lower}, {self.beta_upper}]"
            )

    @classmethod
    def homogeneous(cls, mesh: Mesh, value: float, beta_lower: float | None = None,
                    beta_upper: float | None = None) -> "ConductivityField":
        lo = value if beta_lower is None else beta_lower
        hi = value if beta_upper is None else beta_upper
        return cls(mesh, np.full(mesh.n_triangles, float(value)), lo, hi)

    def with_values(self, values: np.ndarray, beta_lower: float | None = None,
                    beta_upper: float | None = None) -> "ConductivityField":
        vals = np.asarray(values, dtype=float)
        lo = float(vals.min()) if beta_lower is None else beta_lower
        hi = float(vals.max()) if beta_upper is None else beta_upper
        return ConductivityField(self.mesh, vals, lo, hi)


@dataclass(frozen=True)
class Potential:
    """Nodal solution of the forward problem, normalized to zero boundary mean."""

    values: np.ndarray
    gamma_mean: float


class NdMatrix:
    """Symmetric M x M Galerkin matrix of a boundary operator.

    The constructor symmetrizes; an asymmetry above 1e-8 relative is treated
    as a bug in the caller and rejected.
    """

    __slots__ = ("a",)

    def __init__(self, a: np.ndarray):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        scale = max(float(np.max(np.abs(a))), 1e-300)
        if float(np.max(np.abs(a - a.T))) > 1e-8 * scale:
            raise ValueError("matrix is not symmetric within tolerance")
        self.a = 0.5 * (a + a.T)

    @property
    def m(self) -> int:
        return self.a.shape[0]

    def norm2(self) -> float:
        return float(np.linalg.norm(self.a, 2))

    def eigenvalues(self) -> np.ndarray:
        """All eigenvalues, descending."""
        return np.linalg.eigvalsh(self.a)[::-1]

    def __add__(self, other):
        return NdMatrix(self.a + _raw(other))

    def __sub__(self, other):
        return NdMatrix(self.a - _raw(other))

    def __neg__(self):
        return NdMatrix(-self.a)


def _raw(a) -> np.ndarray:
    return a.a if isinstance(a, NdMatrix) else np.asarray(a, dtype=float)


@dataclass(frozen=True)
class BoundaryBasis:
    """Orthonormal mean-free piecewise-linear functions on the gamma arcs.

    ``values[v, i]`` is basis function i at gamma vertex ``gamma_vertices[v]``.
    Functions are orthonormal in the L2 inner product of the boundary polygon
    restricted to gamma (``mass``), and each integrates to zero there.
    """

    mesh: Mesh
    gamma_vertices: np.ndarray
    gamma_angles: np.ndarray
    edges_local: np.ndarray
    edge_lengths: np.ndarray
    values: np.ndarray
    mass: sp.csr_matrix
    gamma_measure: float
    runs: tuple
    closed_loop: bool

    @property
    def size(self) -> int:
        return self.values.shape[1]

    @cached_property
    def weights(self) -> np.ndarray:
        """Integral of each gamma hat function: w = mass @ 1."""
        return np.asarray(self.mass.sum(axis=1)).ravel()

    def integrate(self, nodal: np.ndarray) -> float:
        return float(self.weights @ nodal)

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(f @ (self.mass @ g))

    def gram(self) -> np.ndarray:
        return self.values.T @ (self.mass @ self.values)

    def sample(self, angles: np.ndarray) -> np.ndarray:
        """Evaluate all basis functions at boundary angles by arc interpolation.

        A closed-loop gamma interpolates periodically; open arcs clamp to
        their end values, with a coverage tolerance of one local edge so the
        slightly different gamma extents of two meshes marked from the same
        arcs remain compatible.
        """
        angles = np.asarray(angles, dtype=float)
        out = np.zeros((angles.shape[0], self.size))
        filled = np.zeros(angles.shape[0], dtype=bool)
        tol = float(np.max(self.edge_lengths))
        for order, unwrapped in self.runs:
            if self.closed_loop:
                knots = np.concatenate([unwrapped, [unwrapped[0] + 2.0 * np.pi]])
                vals = np.vstack([self.values[order, :], self.values[order[:1], :]])
                rel = np.mod(angles - knots[0], 2.0 * np.pi) + knots[0]
                sel = ~filled
                for i in range(self.size):
                    out[sel, i] = np.interp(rel[sel], knots, vals[:, i])
                filled[sel] = True
                continue
            lo, hi = unwrapped[0], unwrapped[-1]
            for shift in (0.0, 2.0 * np.pi, -2.0 * np.pi):
                a = angles + shift
                sel = (~filled) & (a >= lo - tol) & (a <= hi + tol)
                if not np.any(sel):
                    continue
                for i in range(self.size):
                    out[sel, i] = np.interp(a[sel], unwrapped, self.values[order, i])
                filled[sel] = True
        if not np.all(filled):
            raise ValueError("angles fall outside the gamma arcs of this basis")
        return out


def _gamma_graph(mesh: Mesh):
    """Local vertex indexing, 1D mass/stiffness, and ordered runs on gamma."""
    gedges = mesh.gamma_edges()
    gverts = np.unique(gedges)
    local = {int(v): i for i, v in enumerate(gverts)}
    nv = gverts.shape[0]
    coords = mesh.vertices[gverts]
    angles = np.mod(np.arctan2(coords[:, 1], coords[:, 0]), 2.0 * np.pi)

    e_local = np.array([[local[int(a)], local[int(b)]] for a, b in gedges])
    lengths = np.hypot(*(coords[e_local[:, 0]] - coords[e_local[:, 1]]).T)

    rows = np.concatenate([e_local[:, 0], e_local[:, 0], e_local[:, 1], e_local[:, 1]])
    cols = np.concatenate([e_local[:, 0], e_local[:, 1], e_local[:, 0], e_local[:, 1]])
    m_vals = np.concatenate([lengths / 3, lengths / 6, lengths / 6, lengths / 3])
    k_vals = np.concatenate([1 / lengths, -1 / lengths, -1 / lengths, 1 / lengths])
    mass = sp.csr_matrix((m_vals, (rows, cols)), shape=(nv, nv))
    stiff = sp.csr_matrix((k_vals, (rows, cols)), shape=(nv, nv))

    adjacency = sp.csr_matrix(
        (np.ones(2 * len(e_local)), (rows[: 2 * len(e_local)], cols[: 2 * len(e_local)])),
        shape=(nv, nv),
    )
    n_runs, run_label = sp.csgraph.connected_components(adjacency, directed=False)

    closed_loop = len(gedges) == nv and n_runs == 1
    runs = []
    for r in range(n_runs):
        members = np.flatnonzero(run_label == r)
        a = angles[members]
        order = members[np.argsort(a)]
        a_sorted = np.sort(a)
        if not closed_loop and members.size > 1:
            # rotate the angular order so the chain does not straddle a gap
            gaps = np.diff(np.concatenate([a_sorted, [a_sorted[0] + 2 * np.pi]]))
            cut = int(np.argmax(gaps))
            if cut != members.size - 1:
                order = np.concatenate([order[cut + 1:], order[: cut + 1]])
                a_sorted = np.concatenate([a_sorted[cut + 1:], a_sorted[: cut + 1] + 2 * np.pi])
        runs.append((order, a_sorted))
    runs.sort(key=lambda item: item[1][0])
    return gverts, angles, e_local, lengths, mass, stiff, runs, closed_loop, n_runs


def build_basis(mesh: Mesh, M: int) -> BoundaryBasis:
    """Build M orthonormal mean-free boundary functions on the gamma arcs.

    The functions are the lowest oscillation modes of the 1D Laplacian along
    the gamma polygon (natural ends), preceded, when gamma has several arcs,
    by the mean-free span of the per-arc indicator functions. On the full
    circle the modes reproduce the trigonometric pairs cos/sin(n theta) up
    to interpolation error, which is what makes the current-to-voltage
    spectrum checks sharp.
    """
    n_gamma_edges = int(np.count_nonzero(mesh.gamma_flags))
    if n_gamma_edges < M + 1:
        raise ValueError(
            f"basis size {M} needs at least {M + 1} gamma edges, "
            f"mesh provides {n_gamma_edges}"
        )
    gverts, angles, e_local, lengths, mass, stiff, runs, closed, n_runs = _gamma_graph(mesh)
    nv = gverts.shape[0]
    if M + n_runs > nv:
        raise ValueError(
            f"basis size {M} exceeds the {nv} gamma vertices minus arc count {n_runs}"
        )

    eigvals, eigvecs = scipy.linalg.eigh(stiff.toarray(), mass.toarray())

    cand = []
    if n_runs > 1:
        # battery modes: arc indicators span the nullspace together with the
        # global constant; their mean-free part carries inter-arc currents
        for order, _ in runs[:-1]:
            v = np.zeros(nv)
            v[order] = 1.0
            cand.append(v)
    n_osc = M - (n_runs - 1)
    cand.extend(eigvecs[:, n_runs: n_runs + n_osc].T)
    cand = np.array(cand)

    w = np.asarray(mass.sum(axis=1)).ravel()
    total = float(w.sum())
    basis = []
    for v in cand:
        v = v - (w @ v) / total
        for u in basis:
            v = v - (u @ (mass @ v)) * u
        nrm = np.sqrt(v @ (mass @ v))
        if nrm < 1e-10:
            raise ValueError("basis candidates became linearly dependent")
        v = v / nrm
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            v = -v
        basis.append(v)
    values = np.array(basis).T

    bb = BoundaryBasis(
        mesh=mesh,
        gamma_vertices=gverts,
        gamma_angles=angles,
        edges_local=e_local,
        edge_lengths=lengths,
        values=values,
        mass=mass,
        gamma_measure=total,
        runs=tuple((o.copy(), a.copy()) for o, a in runs),
        closed_loop=closed,
    )
    gram = bb.gram()
    if float(np.max(np.abs(gram - np.eye(M)))) > 1e-10:
        raise ValueError("basis orthonormalization failed the Gram check")
    return bb


def _p1_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the three P1 shape functions per triangle, (T, 3, 2)."""
    v = mesh.vertices
    t = mesh.triangles
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    twoA = 2.0 * mesh.triangle_areas
    g = np.empty((t.shape[0], 3, 2))
    for i, (a, b) in enumerate(((p2, p1), (p0, p2), (p1, p0))):
        d = a - b
        g[:, i, 0] = -d[:, 1] / twoA
        g[:, i, 1] = d[:, 0] / twoA
    return g


class NdSolver:
    """Factorized forward operator for one conductivity field and basis.

    Solves the zero-flux conductivity equation for every basis current at
    construction and keeps the nodal potentials and their per-triangle
    gradients, so that the current-to-voltage matrix, its restriction-based
    derivative, and per-pixel derivative contributions all come from the
    same solves.
    """

    def __init__(self, field: ConductivityField, basis: BoundaryBasis):
        if field.mesh is not basis.mesh:
            raise ValueError("field and basis must share one mesh object")
        mesh = field.mesh
        self.field = field
        self.basis = basis
        self.mesh = mesh

        areas = mesh.triangle_areas
        grads = _p1_gradients(mesh)
        self.areas = areas
        self.grads = grads

        tris = mesh.triangles
        coef = field.values * areas
        local = coef[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
        rows = np.repeat(tris, 3, axis=1).ravel()
        cols = np.tile(tris, (1, 3)).ravel()
        nvert = mesh.n_vertices
        K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(nvert, nvert)).tocsr()
        self.stiffness = K

        gv = basis.gamma_vertices
        w_local = basis.weights
        w = np.zeros(nvert)
        w[gv] = w_local
        self.mean_weights = w

        bordered = sp.bmat(
            [[K, w[:, None]], [w[None, :], None]], format="csc"
        )
        try:
            self._lu = spla.splu(bordered)
        except RuntimeError as exc:
            raise SolveFailure(f"factorization failed: {exc}") from exc
        self._bordered = bordered

        rhs = np.zeros((nvert + 1, basis.size))
        rhs[gv, :] = basis.mass @ basis.values
        sols = np.empty_like(rhs)
        for j in range(basis.size):
            sols[:, j] = self._solve_one(rhs[:, j])
        self.potentials = sols[:nvert, :]

        # constant per-triangle gradients of all potentials, (T, 2, M)
        self.pot_grads = np.einsum("tvd,tvm->tdm", grads, self.potentials[tris, :])

    def _solve_one(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        res = self._bordered @ x - rhs
        scale = max(float(np.linalg.norm(rhs)), 1e-300)
        rel = float(np.linalg.norm(res)) / scale
        if not np.isfinite(rel) or rel > 1e-10:
            norm_est = spla.onenormest(self._bordered)
            raise SolveFailure(
                f"forward solve residual {rel:.3e} exceeds 1e-10 "
                f"(matrix 1-norm estimate {norm_est:.3e})"
            )
        return x

    def potential(self, coeffs: np.ndarray) -> Potential:
        """Solve for one current given as coefficients over the basis."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.basis.size,):
            raise ValueError(f"expected {self.basis.size} coefficients")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("current coefficients must be finite")
        u = self.potentials @ coeffs
        return Potential(values=u, gamma_mean=float(self.mean_weights @ u))

    @cached_property
    def nd(self) -> NdMatrix:
        ku = self.stiffness @ self.potentials
        return NdMatrix(self.potentials.T @ ku)

    def frechet_triangles(self, tri_mask: np.ndarray) -> NdMatrix:
        """Derivative matrix for the indicator of a triangle subset."""
        g = self.pot_grads[tri_mask]
        a = np.einsum("t,tdi,tdj->ij", self.areas[tri_mask], g, g)
        return NdMatrix(-a)

    def frechet(self, region: PixelSet | None) -> NdMatrix:
        if region is None:
            tri_mask = np.ones(self.mesh.n_triangles, dtype=bool)
        else:
            tri_mask = region.triangle_mask()
        return self.frechet_triangles(tri_mask)

    def pixel_energy_stack(self, flat_ids: np.ndarray, grid) -> np.ndarray:
        """Per-pixel gradient cross-energies, (n, M, M); minus these are the
        pixel-indicator derivative matrices, and they add over pixel unions."""
        flat_ids = np.asarray(flat_ids, dtype=np.int64)
        slot = np.full(grid.nx * grid.ny, -1, dtype=np.int64)
        slot[flat_ids] = np.arange(flat_ids.size)
        tp = grid.tri_pixel
        ok = tp >= 0
        tri_slot = np.where(ok, slot[np.where(ok, tp, 0)], -1)
        sel = tri_slot >= 0
        g = self.pot_grads[sel]
        e = np.einsum("t,tdi,tdj->tij", self.areas[sel], g, g)
        stack = np.zeros((flat_ids.size, self.basis.size, self.basis.size))
        np.add.at(stack, tri_slot[sel], e)
        return stack


def solve(field: ConductivityField, coeffs: np.ndarray, basis: BoundaryBasis) -> Potential:
    """One-off forward solve; builds and discards a factorization."""
    return NdSolver(field, basis).potential(coeffs)


def assemble_nd(field: ConductivityField, basis: BoundaryBasis) -> NdMatrix:
    """Current-to-voltage matrix of the field over the basis."""
    return NdSolver(field, basis).nd


def assemble_frechet(field: ConductivityField, region: PixelSet | None,
                     basis: BoundaryBasis) -> NdMatrix:
    """Conductivity-derivative matrix restricted to a pixel region.

    ``region=None`` means the whole domain; with a homogeneous unit field
    that reproduces the negated current-to-voltage matrix exactly.
    """
    return NdSolver(field, basis).frechet(region)


def project_nd(a_fine: NdMatrix, fine_basis: BoundaryBasis,
               coarse_basis: BoundaryBasis) -> NdMatrix:
    """Re-express a matrix assembled over one basis in another basis.

    Coarse basis functions are sampled at the fine gamma vertices by arc
    interpolation and expanded over the fine basis by L2 inner products on
    the fine boundary; the matrix transforms with that coefficient map.
    """
    sampled = coarse_basis.sample(fine_basis.gamma_angles)
    p = fine_basis.values.T @ (fine_basis.mass @ sampled)
    return NdMatrix(p.T @ a_fine.a @ p)


def nd_to_csv(a: NdMatrix, path) -> None:
    """Row-major full-precision CSV dump."""
    with open(path, "w") as fh:
        for row in a.a:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
