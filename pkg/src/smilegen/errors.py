"""Exception hierarchy. Each class carries a short machine-readable category used by the CLI."""


class SmileGenError(Exception):
    category = "error"


class ValidationError(SmileGenError, ValueError):
    category = "validation"


class DegenerateGeometryError(ValidationError):
    category = "degenerate-geometry"


class ShapeError(ValidationError):
    category = "shape"


class ParseError(ValidationError):
    category = "parse"


class ConfigurationError(SmileGenError):
    category = "configuration"


class DependencyError(SmileGenError):
    category = "dependency"


class IncompatibleCheckpointError(SmileGenError):
    category = "incompatible-checkpoint"


class NonFiniteLossError(SmileGenError, FloatingPointError):
    category = "non-finite-loss"
