"""Exception hierarchy shared by the numerical modules and the CLI."""

from __future__ import annotations

from typing import Iterable


class DnbandsError(Exception):
    """Base class for all errors raised by the package."""


class PreconditionError(DnbandsError, ValueError):
    """An operation was called outside its documented preconditions."""


class DomainError(DnbandsError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class ResourceError(DnbandsError, MemoryError):
    """A requested discretization exceeds the configured node cap."""


class DataQualityError(DnbandsError):
    """Computed data failed a structural sanity check."""


class ClusterCountError(DataQualityError):
    """Clusters in the trusted window do not contain 2k+1 eigenvalues."""

    def __init__(self, offenders: Iterable[tuple[int, int]]):
        self.offenders = list(offenders)
        detail = ", ".join(f"k={k} (found {n}, expected {2 * k + 1})" for k, n in self.offenders)
        super().__init__(f"Cluster count mismatch: {detail}")


class ClusterOverlapError(DataQualityError):
    """Neighbouring clusters are not separated inside the trusted window."""

    def __init__(self, offenders: Iterable[int], width: float):
        self.offenders = list(offenders)
        self.width = width
        super().__init__(
            f"Clusters overlap at k={self.offenders} (estimated width constant C={width:.4g})"
        )


class ConfigError(DnbandsError, ValueError):
    """Experiment configuration failed schema validation."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
