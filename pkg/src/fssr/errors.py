"""Exception hierarchy shared by every fssr module."""


class FSSRError(Exception):
    """Base class for all toolkit errors."""


class UnreadableFile(FSSRError):
    pass


class EmptyAudio(FSSRError):
    pass


class ClipTooShort(FSSRError):
    pass


class AlreadyNormalized(FSSRError):
    pass


class InsufficientData(FSSRError):
    pass


class MissingRoot(FSSRError):
    pass


class PoolTooSmall(FSSRError):
    pass


class ShapeMismatch(FSSRError, ValueError):
    pass


class DimensionMismatch(FSSRError, ValueError):
    pass


class NonFiniteActivation(FSSRError, FloatingPointError):
    pass


class EmptyClass(FSSRError):
    pass


class ConfigMismatch(FSSRError):
    pass


class DivergenceDetected(FSSRError):
    """Training loss became non-finite.

    ``checkpoint`` holds the path of the last good checkpoint, if one was written.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointIncompatible(FSSRError):
    pass


class EmptyInput(FSSRError):
    pass
