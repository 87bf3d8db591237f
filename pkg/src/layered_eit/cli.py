"""Batch pipeline: configure, simulate, reconstruct, score, export.

A run is one JSON configuration file. The pipeline builds two meshes (a
finer one for data generation, guarding against the inverse crime), marks
the current-carrying arcs, rasterizes the phantom on the data mesh,
assembles the measured matrix there with an independently built basis,
projects it to the reconstruction basis, optionally adds noise, calibrates
the semidefiniteness tolerance when asked to, reconstructs, and writes a
self-contained output directory:

    config.json     verbatim copy of the input configuration
    report.json     layers, margins, bisections (reproducible byte for byte)
    metrics.json    truth-vs-recovered scores
    timings.json    wall clock per stage (excluded from determinism checks)
    psd_tests.csv   one line per semidefiniteness test
    fields/         pixel-sampled conductivities, CSV
    masks/          truth and recovered layer masks, PGM
    run.log         log records with timestamps

Exit codes: 0 success, 2 ambiguity abort, 3 configuration error,
4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import (
    ConductivityField,
    NdMatrix,
    assemble_nd,
    build_basis,
    project_nd,
)
from .geometry import (
    Mesh,
    PixelGrid,
    build_disk_mesh,
    locate_points,
    mark_gamma,
    pixelize,
    write_mesh_text,
    write_pgm,
)
from .monotonicity import Priors, min_eig
from .phantoms import PhantomError, PhantomSpec, add_noise, rasterize, validate_pclc
from .reconstruct import (
    Discretization,
    LayerDecomposition,
    ReconstructionError,
    ReconstructOptions,
    reconstruct,
)

__all__ = [
    "ConfigError",
    "RunConfig",
    "Metrics",
    "parse_config",
    "run_pipeline",
    "export_field",
    "compute_metrics",
    "main",
]

logger = logging.getLogger("layered_eit")

_TWO_PI = 2.0 * np.pi


class ConfigError(ValueError):
    """The run configuration is missing, ill-typed, or inconsistent."""


_KNOWN_KEYS = {
    "domain", "gamma_arcs", "basis_size", "pixel_size", "phantom",
    "priors", "tolerances", "noise", "max_layers", "output_dir",
    "data_correction",
}


@dataclass(frozen=True)
class RunConfig:
    radius: float
    target_h: float
    data_mesh_refinement: float
    gamma_arcs: tuple
    basis_size: int
    pixel_size: float
    phantom: PhantomSpec
    priors: Priors
    psd_eps: float | str
    delta_c: float
    noise_level: float
    noise_seed: int
    max_layers: int
    output_dir: str
    data_correction: bool = True
    band_px: int = 2
    value_slack: float | None = None
    raw: dict = field(repr=False, default_factory=dict)


def parse_config(path) -> RunConfig:
    """Load and validate a run configuration, applying documented defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    for key in raw:
        if key not in _KNOWN_KEYS:
            logger.warning("ignoring unknown configuration field %r", key)

    def need(section: str, key: str, typ, default=None):
        block = raw.get(section)
        if block is None:
            raise ConfigError(f"missing configuration section {section!r}")
        if key not in block:
            if default is not None:
                return default
            raise ConfigError(f"missing configuration field {section}.{key}")
        try:
            return typ(block[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field {section}.{key} is ill-typed: {exc}") from exc

    radius = need("domain", "radius", float)
    target_h = need("domain", "target_h", float)
    refinement = need("domain", "data_mesh_refinement", float, 2.0)
    if radius <= 0 or target_h <= 0 or refinement < 1.0:
        raise ConfigError(
            "domain lengths must be positive and data_mesh_refinement >= 1"
        )

    arcs_raw = raw.get("gamma_arcs", [[0.0, _TWO_PI]])
    try:
        arcs = tuple((float(a), float(b)) for a, b in arcs_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"gamma_arcs must be angle pairs: {exc}") from exc

    basis_size = int(raw.get("basis_size", 16))
    if basis_size < 2:
        raise ConfigError(f"basis_size must be >= 2, got {basis_size}")
    pixel_size = float(raw.get("pixel_size", 0.05))
    if pixel_size <= 0:
        raise ConfigError("pixel_size must be positive")

    pr = raw.get("priors")
    if pr is None:
        raise ConfigError("missing configuration section 'priors'")
    try:
        priors = Priors(
            c0=float(pr["c0"]),
            beta_lower=float(pr["beta_lower"]),
            beta_upper=float(pr["beta_upper"]),
            tau=float(pr["tau"]),
        )
    except KeyError as exc:
        raise ConfigError(f"missing priors field {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if priors.tau < 2.0 * pixel_size:
        raise ConfigError(
            f"tau must be at least 2 * pixel_size so layers stay resolvable: "
            f"tau={priors.tau}, pixel_size={pixel_size}"
        )

    ph = raw.get("phantom")
    if ph is None:
        raise ConfigError("missing configuration section 'phantom'")
    try:
        phantom = PhantomSpec.from_dict(
            dict(ph, c0=priors.c0, tau=priors.tau,
                 beta_lower=priors.beta_lower, beta_upper=priors.beta_upper)
        )
    except (PhantomError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad phantom specification: {exc}") from exc

    tol = raw.get("tolerances", {})
    psd_eps = tol.get("psd_eps", "auto")
    if psd_eps != "auto":
        psd_eps = float(psd_eps)
        if psd_eps < 0:
            raise ConfigError("tolerances.psd_eps must be nonnegative or 'auto'")
    delta_c = tol.get("bisection")
    if delta_c is None:
        delta_c = 1e-3 * (priors.beta_upper - priors.beta_lower)
    else:
        delta_c = float(delta_c)
        if delta_c <= 0:
            raise ConfigError("tolerances.bisection must be positive")
    band_px = int(tol.get("band_px", 2))
    if band_px < 0:
        raise ConfigError("tolerances.band_px must be nonnegative")
    value_slack = tol.get("value_slack")
    if value_slack is not None:
        value_slack = float(value_slack)
        if value_slack < 0:
            raise ConfigError("tolerances.value_slack must be nonnegative")

    noise = raw.get("noise", {})
    noise_level = float(noise.get("level", 0.0))
    noise_seed = int(noise.get("seed", 0))
    if noise_level < 0:
        raise ConfigError("noise.level must be nonnegative")

    max_layers = int(raw.get("max_layers", 8))
    if max_layers < 1:
        raise ConfigError("max_layers must be >= 1")

    return RunConfig(
        radius=radius,
        target_h=target_h,
        data_mesh_refinement=refinement,
        gamma_arcs=arcs,
        basis_size=basis_size,
        pixel_size=pixel_size,
        phantom=phantom,
        priors=priors,
        psd_eps=psd_eps,
        delta_c=delta_c,
        noise_level=noise_level,
        noise_seed=noise_seed,
        max_layers=max_layers,
        output_dir=str(raw.get("output_dir", "out")),
        data_correction=bool(raw.get("data_correction", True)),
        band_px=band_px,
        value_slack=value_slack,
        raw=raw,
    )


@dataclass
class Metrics:
    """Truth-vs-recovered scores over the shared pixel grid."""

    per_layer_jaccard: list
    per_component_constant_error: list
    field_l2_rel_error: float
    layer_count_match: bool

    def to_jsonable(self) -> dict:
        return {
            "per_layer_jaccard": self.per_layer_jaccard,
            "per_component_constant_error": self.per_component_constant_error,
            "field_l2_rel_error": self.field_l2_rel_error,
            "layer_count_match": self.layer_count_match,
        }


def compute_metrics(truth: LayerDecomposition, recovered: LayerDecomposition,
                    grid: PixelGrid) -> Metrics:
    """Score a recovery: layer Jaccard, per-component constant errors, field L2.

    Layers are matched by level; within a level each truth component is
    matched to the recovered component of greatest pixel overlap. Truth
    layers or components without a counterpart score Jaccard 0 and a null
    constant error.
    """
    jaccard = []
    const_err = []
    for j in range(1, truth.n_layers + 1):
        t_union = truth.layer_union(j)
        if j <= recovered.n_layers:
            r_union = recovered.layer_union(j)
            inter = t_union.intersection(r_union).count
            union = t_union.union(r_union).count
            jaccard.append(inter / union if union else 1.0)
        else:
            jaccard.append(0.0)
        layer_errs = []
        for comp in truth.layers[j - 1]:
            best = None
            best_overlap = 0
            if j <= recovered.n_layers:
                for rcomp in recovered.layers[j - 1]:
                    ov = comp.region.intersection(rcomp.region).count
                    if ov > best_overlap:
                        best_overlap = ov
                        best = rcomp
            if best is None:
                layer_errs.append(None)
            else:
                layer_errs.append(
                    abs(best.constant - comp.constant) / abs(comp.constant)
                )
        const_err.append(layer_errs)

    mesh = grid.mesh
    areas = mesh.triangle_areas
    vt = truth.rasterize_values(mesh)
    vr = recovered.rasterize_values(mesh)
    num = float(np.sqrt(np.sum(areas * (vt - vr) ** 2)))
    den = float(np.sqrt(np.sum(areas * vt ** 2)))
    return Metrics(
        per_layer_jaccard=jaccard,
        per_component_constant_error=const_err,
        field_l2_rel_error=num / den,
        layer_count_match=truth.n_layers == recovered.n_layers,
    )


def export_field(fld: ConductivityField, grid: PixelGrid, path) -> None:
    """CSV with one row per inside pixel center, sampled from its triangle."""
    ids = np.flatnonzero(grid.inside.ravel())
    centers = grid.center_coords(ids)
    tris = locate_points(fld.mesh, centers)
    values = fld.values[tris]
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for (x, y), v in zip(centers, values):
            fh.write(f"{x:.17g},{y:.17g},{v:.17g}\n")


def calibrate_eps(mesh: Mesh, grid: PixelGrid, basis, fine_mesh: Mesh,
                  fine_basis, priors: Priors, corrected: bool) -> float:
    """Discretization part of the tolerance.

    Measures the homogeneous two-mesh gap the data path introduces at the
    start of a run: the magnitude of the most negative eigenvalue of the
    coarse-assembled background matrix minus the fine-assembled, projected
    one. With per-level data correction that gap is removed by construction,
    so only a relative floor for the residual derivative bias remains.
    """
    coarse = assemble_nd(
        ConductivityField.homogeneous(mesh, priors.c0, priors.beta_lower,
                                      priors.beta_upper), basis)
    floor = 1e-7 * coarse.norm2()
    if corrected:
        return floor
    fine = assemble_nd(
        ConductivityField.homogeneous(fine_mesh, priors.c0, priors.beta_lower,
                                      priors.beta_upper), fine_basis)
    diff = coarse.a - project_nd(fine, fine_basis, basis).a
    evals = np.linalg.eigvalsh(diff)
    return float(max(-evals[0], evals[-1], floor))


class TwoMeshDataModel:
    """Per-level recalibration of two-mesh data against the simulated field.

    The measured matrix carries the fine-mesh discretization of the truth; a
    coarse-mesh simulation of the same field differs by a systematic offset
    that dwarfs deep-layer signals. Re-simulating the *recovered* field on
    both meshes gives that offset for the current level exactly, using only
    quantities the reconstruction already owns. Subtracting it leaves the
    pure fine-mesh data difference, and probe fields for constant recovery
    are pushed through the same path so both sides of every bracketing test
    share one discretization.
    """

    def __init__(self, lambda_meas: NdMatrix, mesh: Mesh, basis,
                 fine_mesh: Mesh, fine_basis, priors: Priors):
        self.lambda_meas = lambda_meas
        self.mesh = mesh
        self.basis = basis
        self.fine_mesh = fine_mesh
        self.fine_basis = fine_basis
        self.priors = priors
        self._level_cache: dict[int, tuple] = {}

    def _fine_values(self, layers: tuple) -> np.ndarray:
        dec = LayerDecomposition(c0=self.priors.c0, tau=self.priors.tau,
                                 layers=tuple(layers))
        return dec.rasterize_values(self.fine_mesh)

    def _fine_nd(self, values: np.ndarray) -> NdMatrix:
        fld = ConductivityField(self.fine_mesh, values,
                                self.priors.beta_lower, self.priors.beta_upper)
        return project_nd(assemble_nd(fld, self.fine_basis),
                          self.fine_basis, self.basis)

    def _offset(self, layers: tuple) -> np.ndarray:
        key = len(layers)
        if key not in self._level_cache:
            dec = LayerDecomposition(c0=self.priors.c0, tau=self.priors.tau,
                                     layers=tuple(layers))
            coarse_vals = dec.rasterize_values(self.mesh)
            coarse = assemble_nd(ConductivityField(
                self.mesh, coarse_vals, self.priors.beta_lower,
                self.priors.beta_upper), self.basis)
            fine = self._fine_nd(self._fine_values(layers))
            self._level_cache[key] = (fine.a - coarse.a,)
        return self._level_cache[key][0]

    def effective_lambda(self, layers: tuple) -> NdMatrix:
        return NdMatrix(self.lambda_meas.a - self._offset(layers))

    def probe_nd(self, layers: tuple, recipe) -> NdMatrix:
        """Fine-simulated probe: the level's field modified by the recipe."""
        pix = None

        def member_of(region):
            nonlocal pix
            if pix is None:
                pix = region.grid.pixel_of_points(
                    self.fine_mesh.triangle_centroids)
            ok = pix >= 0
            member = np.zeros(pix.shape[0], dtype=bool)
            member[ok] = region.mask.ravel()[pix[ok]]
            return member

        values = recipe.apply(self._fine_values(layers), member_of)
        nd_fine = self._fine_nd(values)
        return NdMatrix(nd_fine.a - self._offset(layers))


def run_pipeline(config: RunConfig, out_dir=None) -> Metrics:
    """Execute one configured run end to end and write all artifacts."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fields").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)

    timings: dict[str, float] = {}

    def stage(name):
        t = time.perf_counter()
        timings[name] = t
        logger.info("stage %s", name)
        return t

    stage("mesh")
    mesh = mark_gamma(build_disk_mesh(config.radius, config.target_h),
                      list(config.gamma_arcs))
    fine_h = config.target_h / config.data_mesh_refinement
    fine_mesh = mark_gamma(build_disk_mesh(config.radius, fine_h),
                           list(config.gamma_arcs))
    grid = pixelize(mesh, config.pixel_size)
    timings["mesh"] = time.perf_counter() - timings["mesh"]

    stage("phantom")
    truth = validate_pclc(config.phantom, grid)
    truth_field_fine = rasterize(truth, fine_mesh, config.priors.beta_lower,
                                 config.priors.beta_upper)
    truth_field_coarse = rasterize(truth, mesh, config.priors.beta_lower,
                                   config.priors.beta_upper)
    timings["phantom"] = time.perf_counter() - timings["phantom"]

    stage("data")
    basis = build_basis(mesh, config.basis_size)
    fine_basis = build_basis(fine_mesh, config.basis_size)
    lambda_fine = assemble_nd(truth_field_fine, fine_basis)
    lambda_meas = project_nd(lambda_fine, fine_basis, basis)
    lambda_meas, noise_bound = add_noise(lambda_meas, config.noise_level,
                                         config.noise_seed)
    timings["data"] = time.perf_counter() - timings["data"]

    stage("tolerance")
    if config.psd_eps == "auto":
        eps_disc = calibrate_eps(mesh, grid, basis, fine_mesh, fine_basis,
                                 config.priors, config.data_correction)
        eps = eps_disc + 2.0 * noise_bound
    else:
        eps_disc = None
        eps = float(config.psd_eps)
    logger.info("psd tolerance eps=%.6e (disc=%s, noise bound=%.3e)",
                eps, eps_disc, noise_bound)
    timings["tolerance"] = time.perf_counter() - timings["tolerance"]

    stage("reconstruct")
    data_source = None
    probe_source = None
    if config.data_correction:
        model = TwoMeshDataModel(lambda_meas, mesh, basis, fine_mesh,
                                 fine_basis, config.priors)
        data_source = model.effective_lambda
        probe_source = model.probe_nd
    disc = Discretization(mesh=mesh, grid=grid, basis=basis)
    options = ReconstructOptions(eps=eps, delta_c=config.delta_c,
                                 max_layers=config.max_layers,
                                 data_source=data_source,
                                 probe_source=probe_source,
                                 band_px=config.band_px,
                                 value_slack=config.value_slack)
    report = reconstruct(lambda_meas, config.priors, disc, options)
    timings["reconstruct"] = time.perf_counter() - timings["reconstruct"]

    stage("metrics")
    metrics = compute_metrics(truth, report.decomposition, grid)
    timings["metrics"] = time.perf_counter() - timings["metrics"]

    stage("export")
    (out / "config.json").write_text(
        json.dumps(config.raw, indent=2, sort_keys=True) + "\n")
    report_doc = report.to_jsonable()
    report_doc["tolerance"] = {
        "eps": eps,
        "eps_disc": eps_disc,
        "noise_bound": noise_bound,
        "mode": "auto" if config.psd_eps == "auto" else "explicit",
    }
    (out / "report.json").write_text(
        json.dumps(report_doc, indent=2, sort_keys=True) + "\n")
    (out / "metrics.json").write_text(
        json.dumps(metrics.to_jsonable(), indent=2, sort_keys=True) + "\n")

    with open(out / "psd_tests.csv", "w") as fh:
        fh.write("level,component,candidate,sign,min_eig,verdict\n")
        for r in report.psd_records:
            fh.write(f"{r['level']},{r['component']},{r['candidate']},"
                     f"{r['sign']},{r['min_eig']:.17g},{r['verdict']}\n")

    export_field(truth_field_coarse, grid, out / "fields" / "gamma_true.csv")
    for k, values in enumerate(report.level_fields):
        fld = ConductivityField(mesh, values, config.priors.beta_lower,
                                config.priors.beta_upper)
        export_field(fld, grid, out / "fields" / f"gamma_level_{k}.csv")
    final = ConductivityField(mesh, report.level_fields[-1],
                              config.priors.beta_lower, config.priors.beta_upper)
    export_field(final, grid, out / "fields" / "gamma_final.csv")

    for j in range(1, truth.n_layers + 1):
        write_pgm(truth.layer_union(j), out / "masks" / f"truth_layer_{j}.pgm")
    for j in range(1, report.decomposition.n_layers + 1):
        write_pgm(report.decomposition.layer_union(j),
                  out / "masks" / f"recovered_layer_{j}.pgm")
    write_mesh_text(mesh, out / "mesh.txt")
    timings["export"] = time.perf_counter() - timings["export"]

    timings.update({f"reconstruct.{k}": v for k, v in report.timings.items()})
    (out / "timings.json").write_text(
        json.dumps({"seconds": timings, "written_at": time.strftime("%Y-%m-%dT%H:%M:%S")},
                   indent=2, sort_keys=True) + "\n")

    logger.info("termination: %s with %d layers", report.termination,
                report.decomposition.n_layers)
    if report.abort:
        logger.warning("aborted: %s", report.abort["message"])
    metrics_path = out / "metrics.json"
    logger.info("metrics written to %s", metrics_path)
    run_pipeline.last_report = report
    return metrics


def _oracle_table() -> str:
    """Analytic-vs-FEM comparison on the unit disk, printed as plain text."""
    from .phantoms import annulus_nd_reference

    mesh = build_disk_mesh(1.0, 0.02)
    basis = build_basis(mesh, 16)
    lines = ["case      n   analytic        fem             rel.err"]
    homog = assemble_nd(ConductivityField.homogeneous(mesh, 1.0), basis)
    ev = homog.eigenvalues()
    for n in range(1, 9):
        exact = 1.0 / n
        fem = 0.5 * (ev[2 * n - 2] + ev[2 * n - 1])
        lines.append(f"homog    {n:2d}   {exact:<14.8f}  {fem:<14.8f}  "
                     f"{abs(fem - exact) / exact:.2e}")
    r = np.hypot(*mesh.triangle_centroids.T)
    vals = np.where(r < 0.5, 2.0, 1.0)
    incl = assemble_nd(ConductivityField(mesh, vals, 1.0, 2.0), basis)
    ev = incl.eigenvalues()
    for n in range(1, 9):
        exact = annulus_nd_reference(1.0, 2.0, 0.5, n)
        fem = 0.5 * (ev[2 * n - 2] + ev[2 * n - 1])
        lines.append(f"incl2.0  {n:2d}   {exact:<14.8f}  {fem:<14.8f}  "
                     f"{abs(fem - exact) / exact:.2e}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="layered-eit",
        description="Layered-conductivity reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate, reconstruct, and score a config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--seed", type=int, default=None, help="noise seed override")
    p_run.add_argument("--log-level", default="INFO")

    p_val = sub.add_parser("validate", help="check the phantom assumptions only")
    p_val.add_argument("config")
    p_val.add_argument("--log-level", default="INFO")

    p_or = sub.add_parser("oracle", help="print the analytic-vs-FEM solver table")
    p_or.add_argument("--log-level", default="INFO")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.command == "oracle":
        print(_oracle_table())
        return 0

    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return 3

    if args.command == "validate":
        try:
            mesh = build_disk_mesh(config.radius, config.target_h)
            grid = pixelize(mesh, config.pixel_size)
            truth = validate_pclc(config.phantom, grid)
        except (PhantomError, ValueError) as exc:
            logger.error("phantom invalid: %s", exc)
            return 3
        logger.info("phantom valid: %d layers", truth.n_layers)
        print(f"phantom valid: {truth.n_layers} layers")
        return 0

    if args.seed is not None:
        raw = dict(config.raw)
        raw.setdefault("noise", {})
        raw = json.loads(json.dumps(raw))
        raw["noise"]["seed"] = args.seed
        config = config_from_dict(raw)

    out = Path(args.out if args.out is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter(
        "%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)

    try:
        run_pipeline(config, out)
    except (PhantomError, ConfigError) as exc:
        logger.error("configuration error: %s", exc)
        return 3
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code
        logger.error("numerical error: %s", exc)
        return 4
    report = run_pipeline.last_report
    if report.termination == "ambiguity-abort":
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
