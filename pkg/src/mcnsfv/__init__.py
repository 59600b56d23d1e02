"""Monte Carlo finite-volume solver for barotropic viscous flow on the torus."""

from .fields import (
    Field,
    State,
    Trajectory,
    avg,
    block_average,
    bochner_norm,
    div_h,
    grad_D,
    jump,
    linf_norm,
    lp_norm,
    neg_sobolev_norm,
    relative_energy,
    total_energy,
    w12_seminorm,
)
from .mesh import Face, TorusMesh, build_mesh, project
from .random_data import DataSample, ExperimentModel, draw_sample, rng_stream
from .scheme import (
    FluidParams,
    SchemeConfig,
    SolverOptions,
    energy_ledger_check,
    residual,
    solve_trajectory,
    step,
    upwind_flux,
)

__version__ = "0.1.0"
