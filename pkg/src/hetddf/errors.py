"""Exception types shared across the package."""


class HetddfError(Exception):
    """Base class for all package errors."""


class ScopeError(HetddfError):
    """A factor/variable scope is inconsistent (missing variable, dim clash,
    empty scope, ...)."""


class EliminationError(HetddfError):
    """Marginalizing out a block failed (singular or ill-conditioned).

    Carries the offending variable keys in ``variables``.
    """

    def __init__(self, msg, variables=()):
        super().__init__(msg)
        self.variables = tuple(variables)


class DensityError(HetddfError):
    """A matrix that must be positive definite is not (improper density)."""


class FusionError(HetddfError):
    """Message fusion failed (scope mismatch, non-PD fused marginal, ...)."""


class ConfigError(HetddfError):
    """A scenario configuration file is missing or invalid."""


class NumericalFailure(HetddfError):
    """Wraps a numerical error raised inside a Monte-Carlo run, with context.

    ``run_index``, ``step`` and ``robot`` locate the failure for logging.
    """

    def __init__(self, run_index, step, robot, cause):
        super().__init__(
            f"numerical failure in run {run_index}, step {step}, robot {robot}: {cause}"
        )
        self.run_index = run_index
        self.step = step
        self.robot = robot
        self.cause = cause
