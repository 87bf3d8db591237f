"""Semidefinite test operators driving support detection and constant recovery.

Every accept/reject decision in the reconstruction is a positive
semidefiniteness test of a symmetric matrix built from three ingredients:
the measured current-to-voltage matrix, the one simulated from the current
reconstruction, and conductivity-derivative matrices of pixel regions.
This module assembles those operators from an immutable per-level state
snapshot and provides the eigenvalue-based test itself.

The per-pixel derivative matrices of the current level are cached once, so
a peeling step costs one small matrix update plus one small eigensolve
instead of new PDE solves.

States at recovered levels may carry an :class:`Uncertainty` allowance.
Support and constant errors inherited from earlier levels then enter the
operators as extra bound-limited compensation terms, pixel by pixel, using
the same one-sided bounds that already shield the other components; without
them, tiny model errors near recovered boundaries would read as structure
and swamp the much weaker signals of deeper layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .forward import BoundaryBasis, ConductivityField, NdMatrix, NdSolver
from .geometry import (
    Mesh,
    PixelGrid,
    PixelSet,
    dilate_px,
    erode_px,
    thin_tau,
)

__all__ = [
    "Priors",
    "ComponentRecord",
    "LayerComponent",
    "PendingComponent",
    "Uncertainty",
    "DerivativeCache",
    "Diagnostics",
    "ReconstructionState",
    "build_t",
    "build_gamma_test",
    "build_s",
    "build_s_tilde",
    "min_eig",
    "is_psd",
]


@dataclass(frozen=True)
class Priors:
    """Known-in-advance problem data: background value, bounds, thickness."""

    c0: float
    beta_lower: float
    beta_upper: float
    tau: float

    def __post_init__(self):
        if not (0.0 < self.beta_lower <= self.c0 <= self.beta_upper):
            raise ValueError(
                f"priors must satisfy 0 < beta_lower <= c0 <= beta_upper, got "
                f"({self.beta_lower}, {self.c0}, {self.beta_upper})"
            )
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class LayerComponent:
    """One recovered connected component: support, constant, parent index."""

    region: PixelSet
    constant: float
    parent: int


@dataclass(frozen=True)
class ComponentRecord:
    """A current-level component with its accumulated conductivity value."""

    region: PixelSet
    alpha: float
    parent: int


@dataclass(frozen=True)
class PendingComponent:
    """A freshly detected next-level component awaiting sign and constant.

    Detection leaves a few pixels of boundary fuzz, so the component is
    probed on a trusted eroded footprint: ``core``/``shell`` are the
    tau-thinning of the eroded region and its outer tau layer — the constant
    is probed on the shell while the core is pushed to a conductivity bound.
    ``halo`` is the remaining rim out to a small dilation of the detected
    region; any true component pixels a detection missed or overshot live
    there, and probes push it to the bound so they cannot break dominance.
    With a zero fuzz allowance the split degenerates to the exact one:
    ``core/shell`` partition the detected region and ``halo`` is empty.
    """

    region: PixelSet
    parent: int
    alpha_hat: float
    core: PixelSet
    shell: PixelSet
    halo: PixelSet


@dataclass(frozen=True)
class Uncertainty:
    """Model-error allowance carried by states at recovered levels.

    ``band`` collects pixels near previously recovered component boundaries
    where the support may be off by a few pixels; there the true value may
    sit anywhere inside the prior bounds. ``value_slack`` is the accumulated
    uncertainty of the recovered constants, a small uniform allowance over
    the recovered component volumes.
    """

    band: PixelSet
    value_slack: float


class DerivativeCache:
    """Additive per-pixel derivative matrices for one state level."""

    def __init__(self, flat_ids: np.ndarray, stack: np.ndarray, grid_size: int):
        self.flat_ids = flat_ids
        self.stack = stack
        self._slot = np.full(grid_size, -1, dtype=np.int64)
        self._slot[flat_ids] = np.arange(flat_ids.size)

    @classmethod
    def build(cls, solver: NdSolver, grid: PixelGrid, region: PixelSet) -> "DerivativeCache":
        ids = region.ids()
        stack = solver.pixel_energy_stack(ids, grid)
        return cls(ids, stack, grid.nx * grid.ny)

    def energy_of(self, flat_id: int) -> np.ndarray:
        s = self._slot[flat_id]
        if s < 0:
            raise KeyError(f"pixel {flat_id} is not cached at this level")
        return self.stack[s]

    def energy_sum(self, region: PixelSet) -> np.ndarray:
        slots = self._slot[region.ids()]
        if np.any(slots < 0):
            raise KeyError("region contains pixels outside the cached level set")
        if slots.size == 0:
            m = self.stack.shape[1]
            return np.zeros((m, m))
        return self.stack[slots].sum(axis=0)

    def weighted_sum(self, flat_ids: np.ndarray, weights: np.ndarray) -> np.ndarray:
        slots = self._slot[np.asarray(flat_ids, dtype=np.int64)]
        if np.any(slots < 0):
            raise KeyError("pixels outside the cached level set")
        if slots.size == 0:
            m = self.stack.shape[1]
            return np.zeros((m, m))
        return np.tensordot(weights, self.stack[slots], axes=(0, 0))

    def derivative_of(self, region: PixelSet) -> np.ndarray:
        """Derivative matrix of the region indicator (negated energy sum)."""
        return -self.energy_sum(region)


@dataclass
class Diagnostics:
    """Run-wide mutable sink for test margins and bisection traces."""

    psd_records: list = field(default_factory=list)
    bisections: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def log_psd(self, level, component, candidate, sign, margin, eps):
        self.psd_records.append(
            {
                "level": int(level),
                "component": int(component),
                "candidate": str(candidate),
                "sign": sign,
                "min_eig": float(margin),
                "verdict": "psd" if margin >= -eps else "not-psd",
            }
        )


@dataclass(frozen=True)
class ReconstructionState:
    """Immutable snapshot of the iteration at one level.

    The simulated field equals the background plus every recovered layer
    constant, re-rasterized triangle by triangle, and the caches (forward
    factorization, current-to-voltage matrix, per-pixel derivatives over the
    current level set, per-component derivative matrices) are all derived
    from it at construction.
    """

    lambda_meas: NdMatrix
    priors: Priors
    eps: float
    delta_c: float
    level: int
    field_k: ConductivityField
    components: tuple
    layers: tuple
    mesh: Mesh
    grid: PixelGrid
    basis: BoundaryBasis
    solver: NdSolver
    nd: NdMatrix
    cache: DerivativeCache
    component_derivatives: tuple
    pending: tuple | None
    diagnostics: Diagnostics
    lambda_source: object | None = None
    probe_source: object | None = None
    uncertainty: Uncertainty | None = None
    gamma_pixels: np.ndarray | None = None
    band_plus: np.ndarray | None = None
    band_minus: np.ndarray | None = None
    volume_plus: tuple = ()
    volume_minus: tuple = ()
    band_px: int = 0
    slack_step: float = 0.0

    @classmethod
    def assemble(
        cls,
        *,
        lambda_meas: NdMatrix | None = None,
        priors: Priors,
        eps: float,
        mesh: Mesh,
        grid: PixelGrid,
        basis: BoundaryBasis,
        layers: tuple = (),
        delta_c: float | None = None,
        pending: tuple | None = None,
        diagnostics: Diagnostics | None = None,
        lambda_source=None,
        probe_source=None,
        uncertainty: Uncertainty | None = None,
        band_px: int = 0,
        slack_step: float = 0.0,
    ) -> "ReconstructionState":
        if lambda_source is not None:
            # per-level effective data, e.g. recalibrated against the current
            # simulated field on a finer data mesh
            lambda_meas = lambda_source(layers)
        if lambda_meas is None:
            raise ValueError("either lambda_meas or lambda_source is required")
        if delta_c is None:
            delta_c = 1e-3 * (priors.beta_upper - priors.beta_lower)

        values = np.full(mesh.n_triangles, priors.c0)
        npix = grid.nx * grid.ny
        gamma_pix = np.full(npix, priors.c0)
        for layer in layers:
            bump = np.zeros(mesh.n_triangles)
            for comp in layer:
                bump[comp.region.triangle_mask()] += comp.constant
                gamma_pix[comp.region.ids()] += comp.constant
            values = values + bump
        field_k = ConductivityField(mesh, values, priors.beta_lower, priors.beta_upper)

        if layers:
            records = _records_from_layers(layers, priors.c0)
            level_set = layers[-1][0].region
            for comp in layers[-1][1:]:
                level_set = level_set | comp.region
        else:
            records = (ComponentRecord(grid.inside_set(), priors.c0, -1),)
            level_set = grid.inside_set()

        cache_set = level_set
        if uncertainty is not None:
            cache_set = cache_set | uncertainty.band

        solver = NdSolver(field_k, basis)
        cache = DerivativeCache.build(solver, grid, cache_set)
        comp_dl = tuple(cache.derivative_of(rec.region) for rec in records)

        band_plus = band_minus = None
        volume_plus: tuple = tuple(0.0 for _ in records)
        volume_minus: tuple = tuple(0.0 for _ in records)
        if uncertainty is not None:
            bl, bu = priors.beta_lower, priors.beta_upper
            bids = uncertainty.band.ids()
            gb = gamma_pix[bids]
            band_plus = cache.weighted_sum(bids, np.maximum(bu - gb, 0.0))
            band_minus = cache.weighted_sum(
                bids, np.maximum((gb / bl) * (gb - bl), 0.0))
            slack = max(uncertainty.value_slack, 0.0)
            vp, vm = [], []
            for rec in records:
                up = min(slack, max(bu - rec.alpha, 0.0))
                down = min(slack, max(rec.alpha - bl, 0.0))
                vp.append(up)
                vm.append(down * rec.alpha / (rec.alpha - down) if down > 0 else 0.0)
            volume_plus = tuple(vp)
            volume_minus = tuple(vm)

        return cls(
            lambda_meas=lambda_meas,
            priors=priors,
            eps=float(eps),
            delta_c=float(delta_c),
            level=len(layers),
            field_k=field_k,
            components=records,
            layers=layers,
            mesh=mesh,
            grid=grid,
            basis=basis,
            solver=solver,
            nd=solver.nd,
            cache=cache,
            component_derivatives=comp_dl,
            pending=pending,
            diagnostics=diagnostics if diagnostics is not None else Diagnostics(),
            lambda_source=lambda_source,
            probe_source=probe_source,
            uncertainty=uncertainty,
            gamma_pixels=gamma_pix,
            band_plus=band_plus,
            band_minus=band_minus,
            volume_plus=volume_plus,
            volume_minus=volume_minus,
            band_px=int(band_px),
            slack_step=float(slack_step),
        )

    def with_pending(self, pending: tuple) -> "ReconstructionState":
        return replace(self, pending=tuple(pending))

    def rebuilt_field_values(self) -> np.ndarray:
        """Re-rasterize the field from history; must match field_k exactly."""
        values = np.full(self.mesh.n_triangles, self.priors.c0)
        for layer in self.layers:
            bump = np.zeros(self.mesh.n_triangles)
            for comp in layer:
                bump[comp.region.triangle_mask()] += comp.constant
            values = values + bump
        return values


def _records_from_layers(layers: tuple, c0: float) -> tuple:
    """Accumulate per-component values level by level along parent chains."""
    alphas_prev = [c0]
    for depth, layer in enumerate(layers):
        alphas = []
        for comp in layer:
            if not (0 <= comp.parent < len(alphas_prev)):
                raise ValueError(
                    f"layer {depth + 1} component has invalid parent {comp.parent}"
                )
            alphas.append(alphas_prev[comp.parent] + comp.constant)
        alphas_prev = alphas
    return tuple(
        ComponentRecord(comp.region, alpha, comp.parent)
        for comp, alpha in zip(layers[-1], alphas_prev)
    )


def make_pending(state: ReconstructionState, regions, parents) -> tuple:
    """Wrap detected regions as pending components with their tau split.

    The erosion allowance shrinks automatically for components too small to
    survive it, down to the exact (no-fuzz) split.
    """
    tau = state.priors.tau
    out = []
    for region, parent in zip(regions, parents):
        w = state.band_px
        while w > 0:
            trusted = erode_px(region, w)
            if trusted.count and (trusted - thin_tau(trusted, tau)).count:
                break
            w -= 1
        trusted = erode_px(region, w) if w > 0 else region
        core = thin_tau(trusted, tau)
        out.append(
            PendingComponent(
                region=region,
                parent=int(parent),
                alpha_hat=state.components[parent].alpha,
                core=core,
                shell=trusted - core,
                halo=dilate_px(region, state.band_px) - trusted,
            )
        )
    return tuple(out)


def candidate_coefficients(state: ReconstructionState, n0: int) -> tuple[float, float]:
    """Energy-term coefficients of the candidate set in the support tests."""
    rec = state.components[n0]
    bl, bu = state.priors.beta_lower, state.priors.beta_upper
    coef_plus = (bu - rec.alpha) - state.volume_plus[n0]
    coef_minus = (rec.alpha / bl) * (rec.alpha - bl) - state.volume_minus[n0]
    return max(coef_plus, 0.0), max(coef_minus, 0.0)


def support_test_base(state: ReconstructionState, n0: int, sign: str) -> np.ndarray:
    """Support-test operator without its candidate term.

    Contains the measured-vs-simulated gap, the bound-limited compensation
    of every other current component, and, when the state carries an
    uncertainty allowance, the boundary-band and volume-slack terms.
    """
    _check_sign(sign)
    bl = state.priors.beta_lower
    bu = state.priors.beta_upper
    gap = state.lambda_meas.a - state.nd.a
    rec = state.components[n0]
    if sign == "+":
        a = gap.copy()
        for n, rec_n in enumerate(state.components):
            if n != n0:
                a -= (bu - rec_n.alpha) * state.component_derivatives[n]
        if state.band_plus is not None:
            a += state.band_plus
        if state.volume_plus[n0] > 0.0:
            a -= state.volume_plus[n0] * state.component_derivatives[n0]
    else:
        a = -gap
        for n, rec_n in enumerate(state.components):
            if n != n0:
                a += (rec_n.alpha / bl) * (bl - rec_n.alpha) * state.component_derivatives[n]
        if state.band_minus is not None:
            a += state.band_minus
        if state.volume_minus[n0] > 0.0:
            a -= state.volume_minus[n0] * state.component_derivatives[n0]
    return a


def build_t(state: ReconstructionState, n0: int, candidate: PixelSet, sign: str) -> NdMatrix:
    """Support-test operator for a candidate inclusion inside component n0.

    The measured-vs-simulated data gap is compensated by worst-case
    derivative terms: bound-limited perturbations on every other current
    component, and on the candidate set within component n0. The candidate
    term enters with a nonnegative coefficient, so the operator only grows
    (in the semidefinite order) as the candidate grows.
    """
    _check_sign(sign)
    rec = state.components[n0]
    if not candidate.is_subset_of(rec.region):
        raise ValueError(f"candidate is not a subset of component {n0}")
    a = support_test_base(state, n0, sign)
    coef_plus, coef_minus = candidate_coefficients(state, n0)
    energy = state.cache.energy_sum(candidate)
    if sign == "+":
        a = a + coef_plus * energy
    else:
        a = a + coef_minus * energy
    return NdMatrix(a)


def _check_sign(sign: str) -> None:
    if sign not in ("+", "-"):
        raise ValueError(f"sign must be '+' or '-', got {sign!r}")


def _require_pending(state: ReconstructionState) -> tuple:
    if state.pending is None or len(state.pending) == 0:
        raise RuntimeError("next-level components have not been detected yet")
    return state.pending


@dataclass(frozen=True)
class ProbeRecipe:
    """Mesh-independent description of a probe conductivity.

    Starting from the simulated field of the state's layers: add the offsets
    in ``adds`` region by region, then overwrite the regions in ``sets``
    with absolute values, then clamp into the prior bounds. Both the
    reconstruction mesh and the data mesh rasterize the same recipe.
    """

    adds: tuple
    sets: tuple
    lower: float
    upper: float

    def apply(self, values: np.ndarray, member_of) -> np.ndarray:
        out = values.copy()
        for region, delta in self.adds:
            out[member_of(region)] += delta
        for region, level in self.sets:
            out[member_of(region)] = level
        return np.clip(out, self.lower, self.upper)


def probe_recipe(state: ReconstructionState, m0: int, beta: float,
                 value: float) -> ProbeRecipe:
    """Recipe for the constant-recovery probe around pending component m0.

    Core and halo of m0 go to the bound, the trusted shell carries the probe
    value; other pending components go to the bound over region and halo.
    The probe then dominates the unknown field on the correct side wherever
    detection fuzz could hide true component pixels, while the shell pixels
    that decide the bracketing all sit strictly inside the true component.
    """
    pending = _require_pending(state)
    pc = pending[m0]
    adds = []
    for m, other in enumerate(pending):
        if m != m0:
            adds.append((other.region | other.halo, beta - other.alpha_hat))
    adds.append((pc.core, beta - pc.alpha_hat))
    adds.append((pc.shell, float(value)))
    if pc.halo.count:
        adds.append((pc.halo, beta - pc.alpha_hat))
    sets = []
    if state.uncertainty is not None:
        slack = state.uncertainty.value_slack
        if slack > 0.0:
            pend_union = pending[0].region
            for other in pending[1:]:
                pend_union = pend_union | other.region
            signed = slack if beta == state.priors.beta_upper else -slack
            for rec in state.components:
                vol = rec.region - pend_union
                if state.uncertainty.band.count:
                    vol = vol - state.uncertainty.band
                if vol.count:
                    adds.append((vol, signed))
        if state.uncertainty.band.count:
            sets.append((state.uncertainty.band, float(beta)))
    return ProbeRecipe(
        adds=tuple(adds),
        sets=tuple(sets),
        lower=state.priors.beta_lower,
        upper=state.priors.beta_upper,
    )


def build_gamma_test(state: ReconstructionState, m0: int, beta: float,
                     value: float) -> ConductivityField:
    """Probe conductivity for constant recovery on pending component m0.

    Every other pending component and the tau-core of m0 are pushed to the
    bound ``beta``; ``value`` is the probe offset applied on the outer tau
    shell of m0. ``beta`` must be one of the prior bounds and the probe must
    stay inside the matching bracket.
    """
    pending = _require_pending(state)
    pc = pending[m0]
    bl = state.priors.beta_lower
    bu = state.priors.beta_upper
    slack = 1e-12
    if np.isclose(beta, bu):
        lo, hi = 0.0, bu - pc.alpha_hat
    elif np.isclose(beta, bl):
        lo, hi = bl - pc.alpha_hat, 0.0
    else:
        raise ValueError(f"beta must be a prior bound, got {beta}")
    if not (lo - slack <= value <= hi + slack):
        raise ValueError(
            f"probe value {value} outside bracket [{lo}, {hi}] for beta={beta}"
        )
    recipe = probe_recipe(state, m0, beta, value)
    values = recipe.apply(state.field_k.values,
                          lambda region: region.triangle_mask())
    if np.any(values <= 0.0):
        raise ValueError("probe conductivity lost positivity")
    return ConductivityField(state.mesh, values, bl, bu)


def build_s(state: ReconstructionState, m0: int, value: float, sign: str) -> NdMatrix:
    """Constant-bracketing operator: measured-vs-probe data difference.

    For '+' it is measured minus the upper-bound probe and is positive
    semidefinite exactly when the probe value is at least the component's
    constant; for '-' the lower-bound mirror image holds. When the state
    carries a probe source, the probe field is simulated through the same
    data path as the measurement (then both sides share one discretization);
    otherwise it is assembled on the reconstruction mesh.
    """
    _check_sign(sign)
    beta = state.priors.beta_upper if sign == "+" else state.priors.beta_lower
    probe = build_gamma_test(state, m0, beta, value)
    if state.probe_source is not None:
        recipe = probe_recipe(state, m0, beta, value)
        nd_probe = state.probe_source(state.layers, recipe)
    else:
        nd_probe = NdSolver(probe, state.basis).nd
    if sign == "+":
        return NdMatrix(state.lambda_meas.a - nd_probe.a)
    return NdMatrix(nd_probe.a - state.lambda_meas.a)


def build_s_tilde(state: ReconstructionState, m0: int, sign: str) -> NdMatrix:
    """Derivative-based stand-in for the zero-probe sign classification.

    Reuses the cached current-level derivatives: other pending components
    get full bound compensation, component m0 only on its tau-core, leaving
    the outer shell's uncompensated perturbation to break semidefiniteness
    on exactly one side.
    """
    _check_sign(sign)
    pending = _require_pending(state)
    pc = pending[m0]
    bl = state.priors.beta_lower
    bu = state.priors.beta_upper
    gap = state.lambda_meas.a - state.nd.a

    pend_union = pending[0].region
    for other in pending[1:]:
        pend_union = pend_union | other.region

    if sign == "+":
        a = gap.copy()
        for m, other in enumerate(pending):
            if m != m0:
                a -= (bu - other.alpha_hat) * state.cache.derivative_of(other.region)
        a -= (bu - pc.alpha_hat) * state.cache.derivative_of(pc.core)
        if state.band_plus is not None:
            a += state.band_plus
        for n, rec in enumerate(state.components):
            if state.volume_plus[n] > 0.0:
                vol = rec.region - pend_union
                if state.uncertainty is not None and state.uncertainty.band.count:
                    vol = vol - state.uncertainty.band
                a += state.volume_plus[n] * state.cache.energy_sum(vol)
    else:
        a = -gap
        for m, other in enumerate(pending):
            if m != m0:
                a += (other.alpha_hat / bl) * (bl - other.alpha_hat) * \
                    state.cache.derivative_of(other.region)
        a += (pc.alpha_hat / bl) * (bl - pc.alpha_hat) * \
            state.cache.derivative_of(pc.core)
        if state.band_minus is not None:
            a += state.band_minus
        for n, rec in enumerate(state.components):
            if state.volume_minus[n] > 0.0:
                vol = rec.region - pend_union
                if state.uncertainty is not None and state.uncertainty.band.count:
                    vol = vol - state.uncertainty.band
                a += state.volume_minus[n] * state.cache.energy_sum(vol)
    return NdMatrix(a)


def min_eig(a) -> float:
    """Smallest eigenvalue of the symmetrized matrix."""
    m = _as_array(a)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    sym = 0.5 * (m + m.T)
    return float(np.linalg.eigvalsh(sym)[0])


def is_psd(a, eps: float) -> bool:
    """Positive semidefinite up to an absolute eigenvalue tolerance."""
    if eps < 0.0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    return min_eig(a) >= -eps


def _as_array(a) -> np.ndarray:
    if isinstance(a, NdMatrix):
        return a.a
    return np.asarray(a, dtype=float)
