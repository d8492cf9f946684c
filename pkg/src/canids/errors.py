"""Exception types raised across the package."""


class CanIdsError(Exception):
    """Base class for every error raised by canids."""


class MalformedRecord(CanIdsError, ValueError):
    pass


class UnknownFlag(CanIdsError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class EmptyInput(CanIdsError, ValueError):
    pass


class ShapeMismatch(CanIdsError, ValueError):
    pass


class NonFiniteLoss(CanIdsError, FloatingPointError):
    pass


class VersionMismatch(CanIdsError):
    pass


class CorruptPayload(CanIdsError):
    pass


class DegenerateInput(CanIdsError, ValueError):
    pass


class TooFewSamples(CanIdsError, ValueError):
    pass


class NonNormalSample(CanIdsError, ValueError):
    pass


class NotReady(CanIdsError, RuntimeError):
    pass


class DuplicateLabel(CanIdsError, ValueError):
    pass


class UnknownLabel(CanIdsError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class TargetNotInProfile(CanIdsError, ValueError):
    pass


class LayoutMismatch(CanIdsError, ValueError):
    pass


class EmptyUpdates(CanIdsError, ValueError):
    pass


class EmptyTopology(CanIdsError, ValueError):
    pass


class IoFailure(CanIdsError, OSError):
    pass
