"""Monotonicity-based recovery of nested piecewise constant conductivities
from local current-to-voltage boundary data on a disk."""

from .forward import (
    BoundaryBasis,
    ConductivityField,
    NdMatrix,
    NdSolver,
    Potential,
    assemble_frechet,
    assemble_nd,
    build_basis,
    project_nd,
    solve,
)
from .geometry import (
    Mesh,
    PixelGrid,
    PixelSet,
    build_disk_mesh,
    connected_components,
    is_admissible,
    mark_gamma,
    outer_layer_tau,
    peelable_pixels,
    pixelize,
    thin_tau,
)
from .monotonicity import (
    ComponentRecord,
    LayerComponent,
    Priors,
    ReconstructionState,
    build_gamma_test,
    build_s,
    build_s_tilde,
    build_t,
    is_psd,
    min_eig,
)
from .phantoms import (
    PhantomSpec,
    add_noise,
    annulus_nd_reference,
    rasterize,
    validate_pclc,
)
from .reconstruct import (
    Discretization,
    LayerDecomposition,
    ReconstructionReport,
    ReconstructOptions,
    advance,
    classify_component,
    detect_layer_component,
    reconstruct,
    recover_constant,
)

__version__ = "0.1.0"
