"""Exception taxonomy shared across the package.

Every failure the library raises on purpose derives from :class:`GalignError`,
so callers (notably the CLI) can map errors to exit codes without matching on
message text.
"""

from __future__ import annotations


class GalignError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GalignError, ValueError):
    """Tensor or image geometry does not match what an operation requires."""


class DomainError(GalignError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ParameterError(GalignError, ValueError):
    """A scalar argument (temperature, step size, probe count) is invalid."""


class ContractError(GalignError, RuntimeError):
    """An API was used in a way its contract forbids."""


class ConfigError(GalignError, ValueError):
    """A run, training, or generation configuration is invalid."""


class DataError(GalignError, ValueError):
    """A dataset, sample, or serialized artifact on disk is broken."""


class EmptyReportError(DataError):
    """A report or query contains no usable text."""


class CheckpointError(DataError):
    """A checkpoint file is corrupt or incompatible."""
