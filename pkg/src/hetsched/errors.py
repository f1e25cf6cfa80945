"""Exception hierarchy shared by all subpackages."""


class HetschedError(Exception):
    """Base class for every error raised by this package."""


# graph / network construction
class CycleDetected(HetschedError):
    pass


class UnknownParent(HetschedError):
    pass


class UnknownNode(HetschedError):
    pass


class EmptyDomain(HetschedError):
    pass


# inference and estimation
class TooLarge(HetschedError):
    pass


class ZeroEvidence(HetschedError):
    pass


class EstimatorStarved(HetschedError):
    """Raised when a conditioning count falls below the estimator threshold."""

    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


class RecursionDepthExceeded(HetschedError):
    pass


class NoDecouplingSet(HetschedError):
    """No conditioning set among the candidates separates every parent pair."""


# perfmodel
class DegenerateDof(HetschedError):
    pass


class MissingInput(HetschedError):
    pass


class OutOfRange(HetschedError):
    pass


class UnknownCounter(HetschedError):
    pass


class UnknownResource(HetschedError):
    pass


# fabric / simulation
class Disconnected(HetschedError):
    pass


class NotAvailable(HetschedError):
    pass


class ConfigError(HetschedError):
    pass


class EpisodeDone(HetschedError):
    pass


# neural / agent
class ShapeMismatch(HetschedError):
    pass


class StaleTape(HetschedError):
    pass


class NonFiniteLoss(HetschedError):
    pass


class EmptyResults(HetschedError):
    pass
