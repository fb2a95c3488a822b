"""Exception types shared across the package."""


class GCTError(Exception):
    """Base class for all package errors."""


class DimensionError(GCTError, ValueError):
    pass


class DegenerateRowError(GCTError, ValueError):
    """A softmax row with no unmasked entry."""


class DomainError(GCTError, ValueError):
    pass


class OptimizerError(GCTError, FloatingPointError):
    pass


class ConfigError(GCTError, ValueError):
    pass


class ContractError(GCTError, ValueError):
    """An input violates a documented matrix contract (stochasticity, masking)."""


class VocabularyError(GCTError, KeyError):
    pass


class TaskError(GCTError, ValueError):
    pass


class MetricUndefinedError(GCTError, ValueError):
    pass


class StructureError(GCTError, ValueError):
    pass


class DivergenceError(GCTError, FloatingPointError):
    def __init__(self, iteration: int, message: str = "loss is not finite"):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
