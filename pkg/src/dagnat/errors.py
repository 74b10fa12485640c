"""Exception hierarchy shared by every module of the package."""


class DagnatError(Exception):
    """Base class for all library errors."""


class InvalidLatticeError(DagnatError):
    pass


class DegenerateRowError(DagnatError):
    pass


class InvalidPathError(DagnatError):
    pass


class VocabError(DagnatError):
    pass


class OracleTooLargeError(DagnatError):
    pass


class InfeasibleTargetError(DagnatError):
    pass


class InvalidTargetError(DagnatError):
    pass


class OrderingError(DagnatError):
    pass


class DegenerateBaselineError(DagnatError):
    pass


class ShapeError(DagnatError):
    pass


class CorpusError(DagnatError):
    pass


class GenerationError(DagnatError):
    pass


class ConfigError(DagnatError):
    pass


class CheckpointError(DagnatError):
    pass
