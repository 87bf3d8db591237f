"""Ground-truth layered phantoms, the analytic forward oracle, and noise.

Phantoms are described by shape primitives (disks, rectangles, polygons)
with one constant per shape, one list of shapes per nesting level. They are
rasterized onto the pixel grid by center containment and validated against
the structural assumptions of the reconstruction: connected components with
connected complements, a minimal-thickness margin between consecutive
levels, a strictly interior first level, and conductivity values inside the
declared bounds along every nesting chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ConductivityField, NdMatrix
from .geometry import Mesh, PixelGrid, PixelSet, connected_components, is_admissible, thin_tau
from .monotonicity import LayerComponent
from .reconstruct import LayerDecomposition

__all__ = [
    "PhantomError",
    "Disk",
    "Rect",
    "Polygon",
    "PhantomComponent",
    "PhantomSpec",
    "validate_pclc",
    "rasterize",
    "annulus_nd_reference",
    "add_noise",
]


class PhantomError(ValueError):
    """A phantom specification violates the structural assumptions."""


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        return d[:, 0] ** 2 + d[:, 1] ** 2 <= self.radius ** 2

    def to_dict(self) -> dict:
        return {"shape": "disk", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Rect:
    x0: float
    x1: float
    y0: float
    y1: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return (
            (pts[:, 0] >= self.x0)
            & (pts[:, 0] <= self.x1)
            & (pts[:, 1] >= self.y0)
            & (pts[:, 1] <= self.y1)
        )

    def to_dict(self) -> dict:
        return {"shape": "rect", "x": [self.x0, self.x1], "y": [self.y0, self.y1]}


@dataclass(frozen=True)
class Polygon:
    points: tuple

    def contains(self, pts: np.ndarray) -> np.ndarray:
        # even-odd ray casting against a horizontal ray to the right
        poly = np.asarray(self.points, dtype=float)
        x, y = pts[:, 0], pts[:, 1]
        inside = np.zeros(pts.shape[0], dtype=bool)
        n = poly.shape[0]
        for i in range(n):
            x0, y0 = poly[i]
            x1, y1 = poly[(i + 1) % n]
            crosses = (y0 > y) != (y1 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (x < xi)
        return inside

    def to_dict(self) -> dict:
        return {"shape": "polygon", "points": [list(p) for p in self.points]}


def shape_from_dict(d: dict):
    kind = d.get("shape")
    if kind == "disk":
        return Disk(center=tuple(d["center"]), radius=float(d["radius"]))
    if kind == "rect":
        return Rect(x0=float(d["x"][0]), x1=float(d["x"][1]),
                    y0=float(d["y"][0]), y1=float(d["y"][1]))
    if kind == "polygon":
        return Polygon(points=tuple(tuple(p) for p in d["points"]))
    raise PhantomError(f"unknown shape kind {kind!r}")


@dataclass(frozen=True)
class PhantomComponent:
    shape: object
    constant: float


@dataclass(frozen=True)
class PhantomSpec:
    """Shape primitives per layer with constants and declared bounds."""

    c0: float
    tau: float
    layers: tuple
    beta_lower: float
    beta_upper: float

    def __post_init__(self):
        if not (0.0 < self.beta_lower <= self.c0 <= self.beta_upper):
            raise PhantomError(
                "declared bounds must satisfy 0 < beta_lower <= c0 <= beta_upper"
            )
        for j, layer in enumerate(self.layers, start=1):
            for i, comp in enumerate(layer):
                if comp.constant == 0.0:
                    raise PhantomError(f"layer {j} component {i} has zero constant")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        layers = tuple(
            tuple(
                PhantomComponent(shape=shape_from_dict(c), constant=float(c["constant"]))
                for c in layer
            )
            for layer in d.get("layers", [])
        )
        return cls(
            c0=float(d["c0"]),
            tau=float(d["tau"]),
            layers=layers,
            beta_lower=float(d["beta_lower"]),
            beta_upper=float(d["beta_upper"]),
        )

    def to_dict(self) -> dict:
        return {
            "c0": self.c0,
            "tau": self.tau,
            "beta_lower": self.beta_lower,
            "beta_upper": self.beta_upper,
            "layers": [
                [dict(comp.shape.to_dict(), constant=comp.constant) for comp in layer]
                for layer in self.layers
            ],
        }


def validate_pclc(spec: PhantomSpec, grid: PixelGrid) -> LayerDecomposition:
    """Rasterize a phantom and verify the nested-layer assumptions.

    Violations are reported by assumption item: (i) nonempty components,
    (ii) connected complement, (iii) tau nesting and strict interiority,
    (iv) components connected and pairwise separated.
    """
    centers_all = grid.center_coords(np.arange(grid.nx * grid.ny))
    inside_flat = grid.inside.ravel()

    parent_regions = [grid.inside_set()]
    parent_values = [spec.c0]
    layers = []
    for j, layer in enumerate(spec.layers, start=1):
        thinned = [thin_tau(r, spec.tau) for r in parent_regions]
        comps = []
        values = []
        for i, comp in enumerate(layer):
            covered = comp.shape.contains(centers_all)
            if np.any(covered & ~inside_flat):
                raise PhantomError(
                    f"assumption (iii): layer {j} component {i} leaves the "
                    f"strict interior of the domain"
                )
            region = PixelSet(grid, covered.reshape(grid.ny, grid.nx))
            if region.count == 0:
                raise PhantomError(
                    f"assumption (i): layer {j} component {i} rasterizes to "
                    f"nothing at pixel size {grid.h_px}"
                )
            if len(connected_components(region)) != 1:
                raise PhantomError(
                    f"assumption (iv): layer {j} component {i} is not connected"
                )
            if not is_admissible(region, grid.inside_set()):
                raise PhantomError(
                    f"assumption (ii): layer {j} component {i} has a "
                    f"disconnected complement"
                )
            holders = [
                n for n, thin_r in enumerate(thinned)
                if region.is_subset_of(thin_r)
            ]
            if len(holders) != 1:
                raise PhantomError(
                    f"assumption (iii): layer {j} component {i} does not sit "
                    f"inside the tau-thinning of exactly one parent component"
                )
            parent = holders[0]
            value = parent_values[parent] + comp.constant
            if not (spec.beta_lower <= value <= spec.beta_upper):
                raise PhantomError(
                    f"bounds: layer {j} component {i} reaches value {value} "
                    f"outside [{spec.beta_lower}, {spec.beta_upper}]"
                )
            comps.append(LayerComponent(region=region, constant=comp.constant,
                                        parent=parent))
            values.append(value)
        union = comps[0].region
        for c in comps[1:]:
            union = union | c.region
        if len(connected_components(union)) != len(comps):
            raise PhantomError(
                f"assumption (iv): layer {j} shapes touch or overlap; they "
                f"must rasterize to separate components"
            )
        layers.append(tuple(comps))
        parent_regions = [c.region for c in comps]
        parent_values = values

    return LayerDecomposition(c0=spec.c0, tau=spec.tau, layers=tuple(layers))


def rasterize(decomp: LayerDecomposition, mesh: Mesh,
              beta_lower: float | None = None,
              beta_upper: float | None = None) -> ConductivityField:
    """Triangle-wise conductivity of a decomposition on an arbitrary mesh.

    Each triangle takes the value of the pixel containing its centroid, so
    fields rasterized on the reconstruction mesh agree exactly with the
    pixel memberships used by the derivative cache.
    """
    values = decomp.rasterize_values(mesh)
    lo = float(values.min()) if beta_lower is None else beta_lower
    hi = float(values.max()) if beta_upper is None else beta_upper
    if values.min() <= 0.0:
        raise PhantomError("rasterized conductivity lost positivity")
    return ConductivityField(mesh, values, lo, hi)


def annulus_nd_reference(sigma0: float, sigma1: float, r: float, n: int) -> float:
    """Analytic current-to-voltage eigenvalue for a concentric inclusion.

    Unit disk, full boundary, background ``sigma0`` with value ``sigma1``
    inside radius ``r``; mode n is the trigonometric pair cos/sin(n theta).
    Separation of variables with a power-law ansatz in each annulus gives

        (1 / (n sigma0)) * (1 - mu r^(2n)) / (1 + mu r^(2n)),
        mu = (sigma1 - sigma0) / (sigma1 + sigma0).
    """
    if sigma0 <= 0.0 or sigma1 <= 0.0:
        raise ValueError("conductivities must be positive")
    if not (0.0 < r < 1.0):
        raise ValueError(f"inclusion radius must lie in (0, 1), got {r}")
    if n < 1:
        raise ValueError(f"mode number must be >= 1, got {n}")
    mu = (sigma1 - sigma0) / (sigma1 + sigma0)
    rho = r ** (2 * n)
    return (1.0 / (n * sigma0)) * (1.0 - mu * rho) / (1.0 + mu * rho)


def add_noise(a: NdMatrix, level: float, seed: int) -> tuple[NdMatrix, float]:
    """Add a symmetric perturbation with spectral norm ``level * ||a||``.

    Entries are i.i.d. Gaussian, symmetrized, then rescaled so the spectral
    norm of the perturbation is exact; the returned bound is that norm.
    Deterministic for a fixed seed; level 0 returns the input untouched.
    """
    if level < 0.0:
        raise ValueError(f"noise level must be nonnegative, got {level}")
    if level == 0.0:
        return a, 0.0
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((a.m, a.m))
    e = 0.5 * (g + g.T)
    target = level * a.norm2()
    e *= target / np.linalg.norm(e, 2)
    return NdMatrix(a.a + e), float(np.linalg.norm(e, 2))
