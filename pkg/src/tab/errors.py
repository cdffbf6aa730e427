"""Exception hierarchy shared by all tab modules."""


class TabError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TabError, ValueError):
    """Tensor or array shapes are incompatible with the requested operation."""


class ContractError(TabError, RuntimeError):
    """An operation was invoked outside its contract (e.g. backward on a non-scalar)."""


class ConfigError(TabError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(TabError, ValueError):
    """Dataset-level problem: missing files, split violations, bad labels."""


class FormatError(TabError, ValueError):
    """A serialized artifact (checkpoint, embedding bank) is malformed."""


class StatsError(TabError, ValueError):
    """Not enough data to compute the requested statistics."""


class MetricError(TabError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""


class CodecError(TabError, ValueError):
    """Image decode/encode failure."""
