"""Exception hierarchy shared across the package."""


class GroupChoreoError(Exception):
    """Base class for every error raised by this package."""


# geometry / data shape
class DegenerateRotation(GroupChoreoError, ValueError):
    pass


class NotARotation(GroupChoreoError, ValueError):
    pass


class BadShape(GroupChoreoError, ValueError):
    pass


class ShapeMismatch(GroupChoreoError, ValueError):
    pass


class SequenceTooShort(GroupChoreoError, ValueError):
    pass


class BadDuration(GroupChoreoError, ValueError):
    pass


# diffusion
class BadSteps(GroupChoreoError, ValueError):
    pass


class BadStep(GroupChoreoError, ValueError):
    pass


class BadStepPair(GroupChoreoError, ValueError):
    pass


class MissingEncoder(GroupChoreoError, ValueError):
    pass


class UntrainedModel(GroupChoreoError, RuntimeError):
    pass


# network / contrastive
class TooManyDancers(GroupChoreoError, ValueError):
    pass


class InsufficientDonors(GroupChoreoError, ValueError):
    pass


# training / io
class NonFiniteLoss(GroupChoreoError, RuntimeError):
    pass


class IoFailure(GroupChoreoError, OSError):
    pass


class VersionMismatch(GroupChoreoError, ValueError):
    pass


class CorruptCheckpoint(GroupChoreoError, ValueError):
    pass


# long-form
class AudioTooShort(GroupChoreoError, ValueError):
    pass


class BadMatrix(GroupChoreoError, ValueError):
    pass


# metrics
class TooFewSamples(GroupChoreoError, ValueError):
    pass


class TooFewDancers(GroupChoreoError, ValueError):
    pass


class NoBeats(GroupChoreoError, ValueError):
    pass


class NumericalFailure(GroupChoreoError, ArithmeticError):
    pass
