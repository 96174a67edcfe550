"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A value lies outside the domain of a function (e.g. log of x <= 0)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class LoadError(RuntimeError):
    """A checkpoint or vocabulary could not be loaded into the target."""


class NondeterminismError(RuntimeError):
    """Re-encoding the same inputs produced different embeddings."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
