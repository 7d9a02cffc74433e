"""galign: joint global and sentence-level contrastive alignment.

Trains a pair of small encoders so that whole images match whole reports
and individual sentences match the image regions they describe, then
grounds free-text queries as similarity heatmaps over a patch grid.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    EmptyReportError,
    GalignError,
    ParameterError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DomainError",
    "EmptyReportError",
    "GalignError",
    "ParameterError",
    "ShapeError",
    "SentenceGrounder",
    "__version__",
]


def __getattr__(name: str):
    # Lazy import keeps `import galign` cheap and avoids cycles.
    if name == "SentenceGrounder":
        from .estimator import SentenceGrounder

        return SentenceGrounder
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
