"""Text-aligned backbone pretraining and anomaly-detection evaluation toolkit."""

__version__ = "0.1.0"

from tab.errors import (
    CodecError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    MetricError,
    StatsError,
    TabError,
)

__all__ = [
    "CodecError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "FormatError",
    "MetricError",
    "StatsError",
    "TabError",
    "__version__",
]
