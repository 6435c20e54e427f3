class CtrlFuseError(Exception):
    """Base class for library errors."""


class ShapeError(CtrlFuseError, ValueError):
    pass


class DomainError(CtrlFuseError, ValueError):
    pass


class NumericError(CtrlFuseError, ArithmeticError):
    pass


class ConfigError(CtrlFuseError, ValueError):
    pass


class PlanError(ConfigError):
    pass


class InputError(CtrlFuseError, ValueError):
    pass


class UndefinedMetricError(CtrlFuseError, ValueError):
    """Raised when a metric has no defined value for the given inputs."""


class FrozenParameterError(CtrlFuseError, RuntimeError):
    """A gradient or update reached a parameter marked frozen."""


class WorkerError(CtrlFuseError, RuntimeError):
    def __init__(self, worker_id, cause):
        super().__init__(f"worker {worker_id} failed: {cause!r}")
        self.worker_id = worker_id
        self.cause = cause


class MissingInputError(CtrlFuseError, FileNotFoundError):
    """A required input file or directory does not exist."""
