"""Exception hierarchy shared across the package."""


class CgcLoraError(Exception):
    """Base class for every error raised by cgclora."""


class DimensionError(CgcLoraError, ValueError):
    pass


class ConfigurationError(CgcLoraError, ValueError):
    pass


class ContractError(CgcLoraError, ValueError):
    pass


class NumericError(CgcLoraError, ArithmeticError):
    pass


class OracleError(CgcLoraError, RuntimeError):
    """The function handed to the gradient oracle is not deterministic."""


class TaskNotRegisteredError(CgcLoraError, KeyError):
    def __init__(self, task_id, known=()):
        self.task_id = task_id
        self.known = tuple(known)
        super().__init__(f"task {task_id!r} is not registered (known: {list(self.known)})")

    def __str__(self):
        return self.args[0]


class RegistryConflictError(CgcLoraError, ValueError):
    pass


class LengthError(CgcLoraError, ValueError):
    pass


class UnknownTokenError(CgcLoraError, ValueError):
    pass


class DegenerateSampleError(CgcLoraError, ValueError):
    pass


class PlaceholderError(CgcLoraError, ValueError):
    pass


class NotFittedError(CgcLoraError, AttributeError):
    pass
