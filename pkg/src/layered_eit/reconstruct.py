"""Layer-by-layer recovery of a nested piecewise constant conductivity.

One outer iteration, starting from the current simulated field:

1. for every current-level component, peel a candidate region down from the
   tau-thinning of the component while both support-test operators stay
   positive semidefinite — the fixed point is the next layer's footprint
   inside that component;
2. split the union into connected components and attach each to its parent;
3. classify each new component as a positive or negative perturbation via
   the cheap derivative-based sign operators;
4. recover its constant by bisecting the probe value of the
   constant-bracketing operator over the prior interval;
5. rebuild the simulated field and repeat until a sweep detects nothing.

Detection failures surface as typed errors; the driver converts component
errors into a partial report rather than discarding completed layers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .forward import BoundaryBasis, NdMatrix
from .geometry import (
    Mesh,
    PixelGrid,
    PixelSet,
    connected_components,
    dilate_px,
    erode_px,
    is_admissible,
    peelable_pixels,
    thin_tau,
)
from .monotonicity import (
    Diagnostics,
    LayerComponent,
    Priors,
    ReconstructionState,
    Uncertainty,
    build_s,
    build_s_tilde,
    build_t,
    candidate_coefficients,
    is_psd,
    make_pending,
    min_eig,
    support_test_base,
)

__all__ = [
    "ReconstructionError",
    "DataInconsistencyError",
    "SignAmbiguityError",
    "PriorBoundsError",
    "BisectionBracketError",
    "ParentStraddleError",
    "LayerDecomposition",
    "ReconstructionReport",
    "Discretization",
    "ReconstructOptions",
    "detect_layer_component",
    "classify_component",
    "recover_constant",
    "advance",
    "reconstruct",
]


class ReconstructionError(RuntimeError):
    """Base class for failures of the layer recovery iteration."""


class DataInconsistencyError(ReconstructionError):
    """The peeling seed already fails the support tests."""


class SignAmbiguityError(ReconstructionError):
    """Both or neither sign operator passed; the component sign is undecided."""


class PriorBoundsError(ReconstructionError):
    """The bracketing predicate fails at the prior bound cap."""


class BisectionBracketError(ReconstructionError):
    """The bracketing predicate never switches over the probe interval."""


class ParentStraddleError(ReconstructionError):
    """A detected component is not contained in a single parent component."""


@dataclass(frozen=True)
class LayerDecomposition:
    """Nested layers of connected components with constants and parents."""

    c0: float
    tau: float
    layers: tuple

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer_union(self, j: int) -> PixelSet:
        """Union of the components of layer j (1-based)."""
        comps = self.layers[j - 1]
        out = comps[0].region
        for comp in comps[1:]:
            out = out | comp.region
        return out

    def sign_split(self, j: int) -> tuple[list[int], list[int]]:
        pos = [i for i, c in enumerate(self.layers[j - 1]) if c.constant > 0]
        neg = [i for i, c in enumerate(self.layers[j - 1]) if c.constant < 0]
        return pos, neg

    def component_values(self) -> list[list[float]]:
        """Accumulated conductivity value per component, level by level."""
        out = []
        prev = [self.c0]
        for layer in self.layers:
            vals = [prev[c.parent] + c.constant for c in layer]
            out.append(vals)
            prev = vals
        return out

    def rasterize_values(self, mesh: Mesh) -> np.ndarray:
        """Per-triangle conductivity values on an arbitrary mesh."""
        values = np.full(mesh.n_triangles, self.c0)
        if not self.layers:
            return values
        grid = self.layers[0][0].region.grid
        pix = grid.pixel_of_points(mesh.triangle_centroids)
        ok = pix >= 0
        for layer in self.layers:
            bump = np.zeros(mesh.n_triangles)
            for comp in layer:
                member = np.zeros(mesh.n_triangles, dtype=bool)
                member[ok] = comp.region.mask.ravel()[pix[ok]]
                bump[member] += comp.constant
            values = values + bump
        return values

    def validate(self, grid: PixelGrid, beta_lower: float, beta_upper: float) -> None:
        """Check nesting, admissibility, nonemptiness, and value bounds."""
        parent_regions = [grid.inside_set()]
        values_prev = [self.c0]
        if not (beta_lower <= self.c0 <= beta_upper):
            raise ValueError("background value escapes the declared bounds")
        for j, layer in enumerate(self.layers, start=1):
            if not layer:
                raise ValueError(f"layer {j} is empty")
            thinned = [thin_tau(r, self.tau) for r in parent_regions]
            values = []
            for i, comp in enumerate(layer):
                if comp.constant == 0.0:
                    raise ValueError(f"layer {j} component {i} has zero constant")
                if comp.region.count == 0:
                    raise ValueError(f"layer {j} component {i} is empty")
                if len(connected_components(comp.region)) != 1:
                    raise ValueError(f"layer {j} component {i} is not connected")
                if not is_admissible(comp.region, grid.inside_set()):
                    raise ValueError(
                        f"layer {j} component {i} has a disconnected complement"
                    )
                if not (0 <= comp.parent < len(parent_regions)):
                    raise ValueError(f"layer {j} component {i} has a bad parent index")
                if not comp.region.is_subset_of(thinned[comp.parent]):
                    raise ValueError(
                        f"layer {j} component {i} violates the tau margin to its parent"
                    )
                val = values_prev[comp.parent] + comp.constant
                if not (beta_lower <= val <= beta_upper):
                    raise ValueError(
                        f"layer {j} component {i} reaches value {val} outside "
                        f"[{beta_lower}, {beta_upper}]"
                    )
                values.append(val)
            for i, a in enumerate(layer):
                for b in layer[i + 1:]:
                    if a.region.intersection(b.region).count:
                        raise ValueError(f"layer {j} components overlap")
            parent_regions = [c.region for c in layer]
            values_prev = values

    def to_jsonable(self) -> dict:
        return {
            "c0": self.c0,
            "tau": self.tau,
            "layers": [
                [
                    {
                        "constant": comp.constant,
                        "parent": comp.parent,
                        "mask_rle": _rle_encode(comp.region.ids()),
                    }
                    for comp in layer
                ]
                for layer in self.layers
            ],
        }


def _rle_encode(flat_ids: np.ndarray) -> list[int]:
    """Run-length encode sorted flat ids as [start, length, ...]."""
    out: list[int] = []
    for fid in map(int, flat_ids):
        if out and fid == out[-2] + out[-1]:
            out[-1] += 1
        else:
            out.extend([fid, 1])
    return out


def rle_decode(grid: PixelGrid, rle: list[int]) -> PixelSet:
    ids: list[int] = []
    for start, length in zip(rle[::2], rle[1::2]):
        ids.extend(range(start, start + length))
    return PixelSet.from_ids(grid, ids)


@dataclass
class ReconstructionReport:
    """Everything a run produces besides the artifacts on disk."""

    decomposition: LayerDecomposition
    termination: str
    psd_records: list
    bisections: list
    timings: dict
    level_fields: list
    eps: float
    delta_c: float
    abort: dict | None = None

    def to_jsonable(self) -> dict:
        # timings are deliberately excluded: reports must be reproducible
        # byte for byte across identical runs
        return {
            "termination": self.termination,
            "n_layers": self.decomposition.n_layers,
            "decomposition": self.decomposition.to_jsonable(),
            "psd_tests": self.psd_records,
            "bisections": self.bisections,
            "eps": self.eps,
            "delta_c": self.delta_c,
            "abort": self.abort,
        }


@dataclass(frozen=True)
class Discretization:
    """The mesh, pixel grid, and boundary basis a reconstruction runs on."""

    mesh: Mesh
    grid: PixelGrid
    basis: BoundaryBasis


@dataclass(frozen=True)
class ReconstructOptions:
    """Tolerances and limits of one reconstruction run.

    ``data_source``, when given, maps the recovered layer tuple to the
    effective measured matrix for the next level; the driver uses it to
    recalibrate the data against the current simulated field.
    """

    eps: float
    delta_c: float | None = None
    max_layers: int = 8
    data_source: object | None = None
    probe_source: object | None = None
    band_px: int = 0
    value_slack: float | None = None


def detect_layer_component(state: ReconstructionState, n0: int) -> PixelSet:
    """Peel the next-layer footprint inside current component n0.

    Starts from the tau-thinning of the component (which contains the target
    and has a connected complement) and repeatedly removes single peelable
    pixels while both support tests stay positive semidefinite, scanning in
    ascending flat id order until a full scan removes nothing. Returns the
    empty set immediately when the empty candidate already passes both
    tests.
    """
    diag = state.diagnostics
    eps = state.eps
    rec = state.components[n0]
    grid = state.grid

    empty = grid.empty_set()
    m_plus = min_eig(build_t(state, n0, empty, "+"))
    diag.log_psd(state.level, n0, "empty", "+", m_plus, eps)
    if m_plus >= -eps:
        m_minus = min_eig(build_t(state, n0, empty, "-"))
        diag.log_psd(state.level, n0, "empty", "-", m_minus, eps)
        if m_minus >= -eps:
            return empty

    seed = thin_tau(rec.region, state.priors.tau)
    coef_plus, coef_minus = candidate_coefficients(state, n0)

    base_plus = support_test_base(state, n0, "+")
    base_minus = support_test_base(state, n0, "-")
    energy = state.cache.energy_sum(seed)

    m_plus = min_eig(base_plus + coef_plus * energy)
    m_minus = min_eig(base_minus + coef_minus * energy)
    diag.log_psd(state.level, n0, "seed", "+", m_plus, eps)
    diag.log_psd(state.level, n0, "seed", "-", m_minus, eps)
    if m_plus < -eps or m_minus < -eps:
        raise DataInconsistencyError(
            f"support test fails on the peeling seed of component {n0}: "
            f"margins ({m_plus:.3e}, {m_minus:.3e}) vs eps {eps:.3e}; the data "
            f"are inconsistent with the priors at this level"
        )

    mask = seed.mask.copy()
    while True:
        removed = False
        for pid in peelable_pixels(PixelSet(grid, mask)):
            e_p = state.cache.energy_of(int(pid))
            trial = energy - e_p
            m_plus = min_eig(base_plus + coef_plus * trial)
            diag.log_psd(state.level, n0, f"peel:{pid}", "+", m_plus, eps)
            if m_plus < -eps:
                continue
            m_minus = min_eig(base_minus + coef_minus * trial)
            diag.log_psd(state.level, n0, f"peel:{pid}", "-", m_minus, eps)
            if m_minus < -eps:
                continue
            iy, ix = divmod(int(pid), grid.nx)
            mask[iy, ix] = False
            energy = trial
            removed = True
        if not removed:
            break
    return PixelSet(grid, mask)


def classify_component(state: ReconstructionState, m0: int) -> str:
    """Decide whether pending component m0 is a positive or negative bump.

    Uses the derivative-based sign operators; when the tau-core of the
    component is empty at the grid resolution they are uninformative, so the
    zero-probe bracketing operators are used instead. Both-or-neither
    outcomes raise, carrying the margins.
    """
    pc = state.pending[m0]
    eps = state.eps
    if pc.core.count > 0:
        sp = min_eig(build_s_tilde(state, m0, "+"))
        sm = min_eig(build_s_tilde(state, m0, "-"))
        how = "derivative"
    else:
        sp = min_eig(build_s(state, m0, 0.0, "+"))
        sm = min_eig(build_s(state, m0, 0.0, "-"))
        how = "zero-probe"
    state.diagnostics.log_psd(state.level, m0, f"sign-{how}", "+", sp, eps)
    state.diagnostics.log_psd(state.level, m0, f"sign-{how}", "-", sm, eps)
    plus_ok = sp >= -eps
    minus_ok = sm >= -eps
    if minus_ok and not plus_ok:
        return "positive"
    if plus_ok and not minus_ok:
        return "negative"
    raise SignAmbiguityError(
        f"sign ambiguous for component {m0} at level {state.level}: "
        f"{how} margins (+: {sp:.3e}, -: {sm:.3e}) vs eps {eps:.3e}"
    )


def recover_constant(state: ReconstructionState, m0: int, sign: str) -> float:
    """Bisect the probe value for the constant of pending component m0.

    The bracketing predicate is monotone over the prior interval; bisection
    returns the endpoint on the guaranteed-semidefinite side once the
    bracket is narrower than ``delta_c``. A predicate that is false at the
    prior cap means the bounds are wrong; one that is true at zero never
    switches, so both raise distinct errors.
    """
    pc = state.pending[m0]
    eps = state.eps
    delta_c = state.delta_c
    probes: list[tuple[float, bool]] = []

    def g(v: float, which: str) -> bool:
        ok = is_psd(build_s(state, m0, v, which), eps)
        probes.append((v, ok))
        return ok

    if sign == "positive":
        cap = state.priors.beta_upper - pc.alpha_hat
        if not g(cap, "+"):
            raise PriorBoundsError(
                f"prior bounds violated: bracketing predicate false at the "
                f"upper cap {cap:.6g} for component {m0}"
            )
        if g(0.0, "+"):
            raise BisectionBracketError(
                f"bracket fails to switch for component {m0}: predicate "
                f"already true at 0 on the positive side"
            )
        lo, hi = 0.0, cap
        iters = 0
        while hi - lo > delta_c:
            mid = 0.5 * (lo + hi)
            if g(mid, "+"):
                hi = mid
            else:
                lo = mid
            iters += 1
        value = hi
    elif sign == "negative":
        cap = state.priors.beta_lower - pc.alpha_hat
        if not g(cap, "-"):
            raise PriorBoundsError(
                f"prior bounds violated: bracketing predicate false at the "
                f"lower cap {cap:.6g} for component {m0}"
            )
        if g(0.0, "-"):
            raise BisectionBracketError(
                f"bracket fails to switch for component {m0}: predicate "
                f"already true at 0 on the negative side"
            )
        lo, hi = cap, 0.0
        iters = 0
        while hi - lo > delta_c:
            mid = 0.5 * (lo + hi)
            if g(mid, "-"):
                lo = mid
            else:
                hi = mid
            iters += 1
        value = lo
    else:
        raise ValueError(f"sign must be 'positive' or 'negative', got {sign!r}")

    state.diagnostics.bisections.append(
        {
            "level": state.level,
            "component": int(m0),
            "sign": sign,
            "iterations": iters,
            "value": float(value),
            "probes": [[float(v), bool(ok)] for v, ok in probes],
        }
    )
    return float(value)


def advance(state: ReconstructionState):
    """Run one full outer iteration; returns (next_state, done).

    Detects per current component, splits the union into connected
    components, drops fragments thinner than the minimal-thickness pixel
    area (logged), attaches parents by containment, classifies and recovers
    each constant, and assembles the next-level state. ``done`` is True when
    nothing was detected; the state is then returned unchanged.
    """
    detections = []
    for n0 in range(len(state.components)):
        detections.append(detect_layer_component(state, n0))

    union = detections[0]
    for det in detections[1:]:
        union = union | det
    if union.count == 0:
        return state, True

    min_pixels = int(np.ceil((state.priors.tau / state.grid.h_px) ** 2))
    comps = []
    for comp in connected_components(union):
        if comp.count < min_pixels:
            state.diagnostics.notes.append(
                f"level {state.level}: discarded a {comp.count}-pixel fragment "
                f"below the {min_pixels}-pixel thickness floor"
            )
            continue
        comps.append(comp)
    if not comps:
        return state, True

    parents = []
    for i, comp in enumerate(comps):
        holders = [
            n for n, rec in enumerate(state.components)
            if comp.is_subset_of(rec.region)
        ]
        if len(holders) != 1:
            raise ParentStraddleError(
                f"detected component {i} is contained in {len(holders)} parent "
                f"components; expected exactly one"
            )
        parents.append(holders[0])

    staged = state.with_pending(make_pending(state, comps, parents))
    entries = []
    for m0 in range(len(comps)):
        sign = classify_component(staged, m0)
        value = recover_constant(staged, m0, sign)
        entries.append(LayerComponent(region=comps[m0], constant=value, parent=parents[m0]))

    uncertainty = state.uncertainty
    if state.band_px > 0 or state.slack_step > 0.0:
        band = state.uncertainty.band if state.uncertainty else state.grid.empty_set()
        for comp in comps:
            ring = dilate_px(comp, state.band_px) - erode_px(comp, state.band_px)
            band = band | ring
        prev_slack = state.uncertainty.value_slack if state.uncertainty else 0.0
        uncertainty = Uncertainty(band=band, value_slack=prev_slack + state.slack_step)

    next_state = ReconstructionState.assemble(
        lambda_meas=state.lambda_meas,
        priors=state.priors,
        eps=state.eps,
        delta_c=state.delta_c,
        mesh=state.mesh,
        grid=state.grid,
        basis=state.basis,
        layers=state.layers + (tuple(entries),),
        diagnostics=state.diagnostics,
        lambda_source=state.lambda_source,
        probe_source=state.probe_source,
        uncertainty=uncertainty,
        band_px=state.band_px,
        slack_step=state.slack_step,
    )
    return next_state, False


def reconstruct(lambda_meas: NdMatrix, priors: Priors, disc: Discretization,
                options: ReconstructOptions) -> ReconstructionReport:
    """Drive the iteration from a homogeneous start until it terminates.

    Termination reasons: ``empty-layer`` (a sweep found nothing more),
    ``max-layers`` (layer budget exhausted), or ``ambiguity-abort`` (a
    component-level error stopped a sweep; completed layers are kept and
    the error details are recorded).
    """
    diagnostics = Diagnostics()
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    delta_c = options.delta_c
    if delta_c is None:
        delta_c = 1e-3 * (priors.beta_upper - priors.beta_lower)
    slack_step = options.value_slack
    if slack_step is None:
        slack_step = 2.0 * delta_c
    state = ReconstructionState.assemble(
        lambda_meas=lambda_meas,
        priors=priors,
        eps=options.eps,
        delta_c=delta_c,
        mesh=disc.mesh,
        grid=disc.grid,
        basis=disc.basis,
        diagnostics=diagnostics,
        lambda_source=options.data_source,
        probe_source=options.probe_source,
        band_px=options.band_px,
        slack_step=slack_step,
    )
    timings["assemble-level-0"] = time.perf_counter() - t0

    level_fields = [state.field_k.values.copy()]
    termination = "max-layers"
    abort = None
    for _ in range(options.max_layers):
        t0 = time.perf_counter()
        try:
            state, done = advance(state)
        except ReconstructionError as exc:
            termination = "ambiguity-abort"
            abort = {"error": type(exc).__name__, "message": str(exc),
                     "level": state.level}
            timings[f"advance-level-{state.level}"] = time.perf_counter() - t0
            break
        timings[f"advance-level-{state.level}"] = time.perf_counter() - t0
        if done:
            termination = "empty-layer"
            break
        level_fields.append(state.field_k.values.copy())

    decomposition = LayerDecomposition(
        c0=priors.c0, tau=priors.tau, layers=state.layers
    )
    return ReconstructionReport(
        decomposition=decomposition,
        termination=termination,
        psd_records=diagnostics.psd_records,
        bisections=diagnostics.bisections,
        timings=timings,
        level_fields=level_fields,
        eps=state.eps,
        delta_c=state.delta_c,
        abort=abort,
    )
