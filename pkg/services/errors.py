"""Exception hierarchy shared by the service layer."""


class CascadeError(Exception):
    """Base class for every error raised by the cascade services."""
    pass


class ShapeError(CascadeError):
    """Raised when tensor shapes do not conform."""
    pass


class GraphError(CascadeError):
    """Raised on misuse of the differentiable compute graph."""
    pass


class DatasetError(CascadeError):
    """Raised for invalid generator specs or split requests."""
    pass


class FormatError(CascadeError):
    """Raised when a binary or text artifact cannot be decoded."""
    pass


class ModelError(CascadeError):
    """Raised for architecture mismatches in backbones and ICs."""
    pass


class DistillError(CascadeError):
    """Raised when a training run cannot proceed."""
    pass


class WiseError(CascadeError):
    """Raised by ensemble fitting and early-exit inference."""
    pass


class IsoComputeError(WiseError):
    """Raised when a FLOP target lies outside the achievable range."""
    pass


class CostModelError(CascadeError):
    """Raised by FLOP accounting, sweeps and the stream model."""
    pass


class ProbeError(CascadeError):
    """Raised by loss-landscape scanning."""
    pass


class ConfigError(CascadeError):
    """Raised when an experiment config is malformed."""
    pass


class ArtifactExistsError(CascadeError):
    """Raised when a command would overwrite an existing artifact."""
    pass
