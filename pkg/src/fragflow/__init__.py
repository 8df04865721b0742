"""fragflow: a numerical laboratory for transport-fragmentation-coagulation
population balance equations.

The package discretizes the density u(x, m) of clusters over position and
mass, implements the elementary evolution semigroups (advection along
characteristics with absorption, diffusion, fragmentation loss/gain,
coagulation), and turns the structural properties of the model (mass
conservation, substochasticity, perturbation margins, moment
regularization) into machine-checkable certificates.
"""

from .errors import ConfigError, FragflowError, GridError, IntegrationError, SolverError
from .grids import (
    MassGrid,
    SpatialGrid,
    StateField,
    classical_moment,
    moment,
    weighted_norm,
    weighted_norm_mu,
)
from .kernels import (
    AbsorptionRate,
    Certificate,
    CoagulationKernel,
    DaughterKernel,
    DominatingKernel,
)

__version__ = "0.1.0"

__all__ = [
    "AbsorptionRate",
    "Certificate",
    "CoagulationKernel",
    "ConfigError",
    "DaughterKernel",
    "DominatingKernel",
    "FragflowError",
    "GridError",
    "IntegrationError",
    "MassGrid",
    "SolverError",
    "SpatialGrid",
    "StateField",
    "classical_moment",
    "moment",
    "weighted_norm",
    "weighted_norm_mu",
    "__version__",
]
