"""Exception types shared across the package."""


class CrossUError(Exception):
    """Base class for all crossu errors."""


class InvalidDimensionError(CrossUError, ValueError):
    """A height/width/patch argument is zero, negative, or inconsistent."""


class ShapeError(CrossUError, ValueError):
    """Tensor or grid shapes do not line up."""


class InvalidTransformError(CrossUError, ValueError):
    """Camera transform parameters are out of range (e.g. zoom <= 0)."""


class InvalidRateError(CrossUError, ValueError):
    """Token routing rate outside [0, 1]."""


class InvalidConfigError(CrossUError, ValueError):
    """Model or run configuration violates an invariant."""


class InvalidGuidanceError(CrossUError, ValueError):
    """Guidance spec violates the rate constraints (cr < ur, cr < 0.5)."""


class InvalidImageError(CrossUError, ValueError):
    """Image is degenerate (zero pixels) or otherwise unusable."""


class TrainingDivergenceError(CrossUError, RuntimeError):
    """Loss became non-finite during training."""


class SamplerDivergenceError(CrossUError, RuntimeError):
    """Sampler state became non-finite mid-trajectory."""


class CorpusError(CrossUError, RuntimeError):
    """Dataset directory unusable (empty, or too many decode failures)."""


class IntegrityError(CrossUError, RuntimeError):
    """Checkpoint or tensor container failed an integrity check."""
