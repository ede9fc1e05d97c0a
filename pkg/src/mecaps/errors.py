"""Exception types shared across the package."""


class MecapsError(Exception):
    """Base class for all package errors."""


class ShapeError(MecapsError, ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(MecapsError, ValueError):
    """A configuration value is invalid or inconsistent."""


class GraphError(MecapsError, RuntimeError):
    """Backward was requested on a tensor outside the op graph."""


class DataFormatError(MecapsError, ValueError):
    """A dataset file is malformed (bad magic, truncation, bad dtype)."""


class CheckpointError(MecapsError, ValueError):
    """A checkpoint file is malformed or incompatible."""
