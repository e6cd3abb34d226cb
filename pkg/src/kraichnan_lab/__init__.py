"""Second-moment laboratory for passive scalars under Kraichnan transport noise.

The closed Fourier-lattice equation for a_k = E|phi_hat(k)|^2 is assembled as
a sparse generator and integrated exactly; Monte Carlo sampling of the
Galerkin-truncated SPDE serves as an independent cross-check.
"""
import os as _os

import numba as _numba

# OpenMP unless the user chose a layer; avoids probing an outdated TBB
if not _os.environ.get("NUMBA_THREADING_LAYER"):
    _numba.config.THREADING_LAYER = "omp"

from .coefficients import (  # noqa: E402
    AssumptionAudit,
    AssumptionError,
    ModelSpec,
    NoiseCoefficients,
    S_function,
    audit_assumption,
    build,
    structure_function,
    zero_coefficients,
)
from .krylov import StiffnessError
from .lattice import Lattice, annulus, enumerate_lattice, proj_norm_sq
from .master import Generator, Trajectory, assemble, integrate, lp_balance
from .montecarlo import StabilityError, empirical_second_moments, simulate
from .poincare import InequalityCase, SparseField, batch_verify, verify
from .spectra import (
    SigmaWeight,
    SolverError,
    annulus_report,
    annulus_slope,
    covariance,
    correlation_function,
    fit_decay_rate,
    invariant_spectrum,
    sigma_norm_sq,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionAudit", "AssumptionError", "ModelSpec", "NoiseCoefficients", "S_function",
    "audit_assumption", "build", "structure_function", "zero_coefficients",
    "StiffnessError", "Lattice", "annulus", "enumerate_lattice", "proj_norm_sq",
    "Generator", "Trajectory", "assemble", "integrate", "lp_balance",
    "StabilityError", "empirical_second_moments", "simulate",
    "InequalityCase", "SparseField", "batch_verify", "verify",
    "SigmaWeight", "SolverError", "annulus_report", "annulus_slope", "covariance",
    "correlation_function", "fit_decay_rate", "invariant_spectrum", "sigma_norm_sq",
    "__version__",
]
