"""Exception hierarchy shared by every phnn module."""


class PHNNError(Exception):
    """Base class for all library errors."""


class LengthMismatch(PHNNError):
    pass


class NonFinite(PHNNError):
    pass


class ShapeMismatch(PHNNError):
    pass


class KernelTooLarge(PHNNError):
    pass


class WindowMismatch(PHNNError):
    pass


class DegenerateBatch(PHNNError):
    pass


class InvalidTarget(PHNNError):
    pass


class NotScalar(PHNNError):
    pass


class AlreadyConsumed(PHNNError):
    pass


class InvalidN(PHNNError):
    pass


class SpecInvalid(PHNNError):
    pass


class DivisibilityError(PHNNError):
    pass


class ChannelPolicyError(PHNNError):
    pass


class ParseError(PHNNError):
    pass


class DataModelMismatch(PHNNError):
    pass


class NonFiniteLoss(PHNNError):
    pass


class EmptyReference(PHNNError):
    pass


class CheckpointError(PHNNError):
    """Any unreadable or inconsistent checkpoint file."""


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class DigestMismatch(CheckpointError):
    pass


class IoError(PHNNError):
    pass
