"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of a function (e.g. log of a non-positive value)."""


class ContractError(RuntimeError):
    """A calling contract was violated (non-scalar loss, missing noise, wrong family...)."""


class StructureError(ValueError):
    """A prior snapshot does not match the model it is meant to regularize."""


class ConfigurationError(ValueError):
    """Invalid run or data configuration."""


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


class ConsistencyError(ValueError):
    """File contents disagree with their own metadata."""
