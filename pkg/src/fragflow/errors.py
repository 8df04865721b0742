"""Exception types shared across the package."""


class FragflowError(Exception):
    """Base class for all package errors."""


class GridError(FragflowError):
    """Invalid grid construction or mismatched grids."""


class ConfigError(FragflowError):
    """Scenario configuration is inconsistent or incomplete."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IntegrationError(FragflowError):
    """A numerical integrator failed (non-finite data, no convergence)."""


class SolverError(FragflowError):
    """Time-evolution solver failure (step rejection, Picard divergence)."""
