"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so keep the classes coarse.
"""


class ContractError(ValueError):
    """Precondition violated by the caller (bad shapes, ranges, arguments)."""


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class FormatError(ValueError):
    """Malformed, truncated or incompatible binary container."""


class NumericalError(ArithmeticError):
    """NaN/Inf encountered or an iterative routine failed to converge."""


class SvdConvergenceError(NumericalError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(off-diagonal residual {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


class ColdMemoryError(RuntimeError):
    """A temporal queue was empty when a reference matrix was requested."""

    def __init__(self, timestep: int):
        super().__init__(f"temporal memory queue for timestep {timestep} is empty")
        self.timestep = timestep
