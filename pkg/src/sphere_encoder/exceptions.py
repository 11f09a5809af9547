"""Exception hierarchy shared across the package."""


class SphereEncoderError(Exception):
    """Base class for all package errors."""


class DegenerateLatent(SphereEncoderError, ValueError):
    """A latent vector is too close to zero to be projected onto the sphere."""


class InvalidAngle(SphereEncoderError, ValueError):
    pass


class InvalidClass(SphereEncoderError, ValueError):
    pass


class ConfigMismatch(SphereEncoderError, ValueError):
    """Inputs, checkpoints or configs disagree about shapes or fields."""


class ConfigError(SphereEncoderError, ValueError):
    """A run configuration is malformed (unknown key, missing field, bad value)."""


class CorruptCheckpoint(SphereEncoderError, IOError):
    pass


class NonFiniteSample(SphereEncoderError, FloatingPointError):
    pass


class NonFiniteLoss(SphereEncoderError, FloatingPointError):
    """Raised by the training loop; ``batch_index`` points at the offending sample."""

    def __init__(self, message, batch_index=None, report=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.report = report or {}
