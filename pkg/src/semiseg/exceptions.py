"""Exception hierarchy for the semiseg package."""


class SemisegError(Exception):
    """Base class for all package errors."""


class ParameterError(SemisegError):
    """An argument is outside its documented range."""


class MappingError(SemisegError):
    """A label remap table is missing a class id."""


class ModelError(SemisegError):
    """Shape mismatch or invalid state in the network."""


class OptimizerError(SemisegError):
    """Non-finite gradients or inconsistent optimizer state."""


class ValidationError(SemisegError):
    """Input data violates a structural invariant."""


class ConfigError(SemisegError):
    """Bad configuration file or value."""


class FormatError(SemisegError):
    """Corrupt or unsupported on-disk file."""


class EvaluationError(SemisegError):
    """Predictions missing or inconsistent with ground truth."""


class PipelineError(SemisegError):
    """A stage's inputs are missing or inconsistent."""
