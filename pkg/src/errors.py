class BeamLabError(Exception):
    """Base class for every error raised by the beam alignment lab."""


class DomainError(BeamLabError, ValueError):
    """An input lies outside the domain of an operation (angle range, zero channel)."""


class ConfigError(BeamLabError, ValueError):
    """Invalid configuration value. ``pointer`` is the JSON pointer of the offending key."""

    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        if pointer:
            message = f"{pointer}: {message}"
        super().__init__(message)


class ShapeError(BeamLabError, ValueError):
    """Array dimensions do not match what the model or codebook expects."""


class EstimatorError(BeamLabError, ValueError):
    """The requested Shapley estimator cannot handle the problem size."""


class TrainingError(BeamLabError, RuntimeError):
    """Training diverged (non-finite loss)."""


class BuildError(BeamLabError, ValueError):
    """A neighbour index or calibration set cannot be built from empty data."""


class DependencyError(BeamLabError, RuntimeError):
    """An upstream pipeline artifact is missing."""

    def __init__(self, message: str, stage: str = ""):
        self.stage = stage
        super().__init__(message)


class ArtifactFormatError(BeamLabError, ValueError):
    """A binary artifact has the wrong magic bytes or an unsupported version."""
