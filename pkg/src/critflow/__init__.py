"""Numerical laboratory for the Sobolev-critical fast diffusion equation and
the normalized Yamabe flow on bounded domains, with single-bubble analysis."""

import os as _os

# CRITFLOW_THREADS pins BLAS/OpenMP threads; it must act before numpy loads
if _os.environ.get("CRITFLOW_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = _os.environ["CRITFLOW_THREADS"]

from .geometry import (ConfigurationError, Domain, DomainError, Field, Grid, ResolutionError,
                       build_grid, integrate, surface_integrate)
from .elliptic import (ParameterError, SolverError, green_regular_part, harmonic_extension,
                       solve_poisson)
from .bubble import (BubbleParams, DimensionConstants, bubble_field, dimension_constants,
                     kernel_fields, projected_bubble)
from .flow import (DtPolicy, FlowAbort, FlowState, PhysicalState, energy_functionals,
                   estimate_extinction, initial_state, preset_initial, run_yamabe,
                   step_physical, step_yamabe, to_normalized)
from .analysis import (classify_dichotomy, decompose, fit_bubble, pohozaev_bubble_check,
                       rate_report, weighted_inner)

__version__ = "0.1.0"
