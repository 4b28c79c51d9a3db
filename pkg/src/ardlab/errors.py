"""Exception hierarchy shared across the package.

Every error raised on a documented failure path derives from ArdError so
callers (and the command line front end) can distinguish usage problems
from genuine numeric failures.
"""


class ArdError(Exception):
    """Base class for all package errors."""


class ShapeError(ArdError):
    """Operand shapes or ranks are incompatible with the requested op."""


class GraphError(ArdError):
    """Autodiff misuse: non-scalar loss, foreign tensor, or a second
    differentiation through gradients."""


class DegenerateMaskError(ArdError):
    """An attention row has no admissible key; softmax would be undefined."""


class RangeError(ArdError):
    """A step index, time value, or injection point is outside its domain."""


class UnknownClassError(ArdError):
    """A class label has no entry in the teacher's class map."""


class ConfigError(ArdError):
    """Invalid or inconsistent configuration values."""


class CacheStateError(ArdError):
    """A key/value cache was consumed out of order or fed wrong shapes."""


class LoadError(ArdError):
    """A persisted file has a bad magic, unknown version, or does not
    match the configuration it is loaded against."""


class NumericError(ArdError):
    """A non-finite value appeared where the contract requires finite ones."""


class RefusalError(ArdError):
    """The command refused to act (e.g. an output exists and --force is absent)."""
