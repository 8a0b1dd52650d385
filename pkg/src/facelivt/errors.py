"""Exception hierarchy shared across the package."""


class FaceLiVTError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FaceLiVTError, ValueError):
    """Tensor or parameter shapes do not agree."""


class NonFiniteError(FaceLiVTError, FloatingPointError):
    """An operation produced NaN or Inf."""


class FormError(FaceLiVTError):
    """A train-form object was given where a deploy-form one is required, or vice versa."""


class AlreadyFusedError(FormError):
    def __init__(self, what="graph"):
        super().__init__(f"{what} is already fused")


class ConfigError(FaceLiVTError, ValueError):
    """Invalid variant configuration or ablation knob."""


class WeightFileError(FaceLiVTError):
    """Malformed, truncated or corrupted weight file."""
