"""Exception hierarchy shared by every percolab module."""


class PercolabError(Exception):
    """Base class for all percolab errors."""


class DomainError(PercolabError, ValueError):
    """An argument lies outside the domain of the operation."""


class DepthError(DomainError):
    """A level beyond the stored depth of a hierarchical decomposition was requested."""


class MismatchError(DomainError):
    """Objects built from different decompositions or geometries were combined."""


class KernelContractError(PercolabError, ArithmeticError):
    """A kernel violates the lower-bound / symmetry contract it was declared with."""


class InsufficientSamplesError(DomainError):
    """Too few replicates for the requested estimate."""


class SizeError(DomainError):
    """Instance too large for exact enumeration."""


class BracketError(PercolabError, RuntimeError):
    """Bisection could not bracket a crossing."""


class ConfigError(DomainError):
    """Invalid experiment configuration (CLI exit code 1)."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
