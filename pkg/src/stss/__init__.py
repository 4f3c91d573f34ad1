"""Shape-tailored scale-space segmentation toolkit."""

from .grid import (
    Partition,
    boundary_sites,
    central_gradient_magnitude,
    connected_components,
    dilate,
    interior_sites,
    mask_diameter,
    masked_laplacian,
    neumann_laplacian,
    periodic_laplacian,
    upwind_gradient_magnitude,
)
from .solvers import (
    SolverConfig,
    SolverConvergenceError,
    heat_step,
    solve_screened_poisson,
    solve_zero_mean_poisson,
)

__version__ = "0.1.0"
