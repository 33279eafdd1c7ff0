"""Exception hierarchy shared by every tempoparse module."""


class TempoparseError(Exception):
    """Base class for all library errors."""


class ConfigInvalid(TempoparseError, ValueError):
    pass


class InvalidParameter(TempoparseError, ValueError):
    pass


class ShapeMismatch(TempoparseError, ValueError):
    pass


class IndexOutOfRange(TempoparseError, IndexError):
    pass


class OverlapConflict(TempoparseError, ValueError):
    """Two segments of the same group assign different classes to one frame."""


class AllTargetsAbsent(TempoparseError, ValueError):
    pass


class UnnormalizedTarget(TempoparseError, ValueError):
    pass


class NoKeyframesAvailable(TempoparseError, ValueError):
    pass


class EmptyStream(TempoparseError, ValueError):
    pass


class MissingGroup(TempoparseError, KeyError):
    pass


class DegenerateTruth(TempoparseError, ValueError):
    """Balanced accuracy is undefined when the truth holds a single class."""


class EmptyCorpus(TempoparseError, ValueError):
    pass


class MissingArtifact(TempoparseError, FileNotFoundError):
    pass
