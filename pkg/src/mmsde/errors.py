"""Exception hierarchy shared by all modules."""


class MmsdeError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(MmsdeError, ValueError):
    """A numerical parameter is out of its admissible range."""


class CapabilityError(MmsdeError, NotImplementedError):
    """The requested operation is not supported for this kind of object."""


class AssumptionError(MmsdeError):
    """A structural assumption on the coefficients does not hold."""


class RegimeError(MmsdeError):
    """The (epsilon, gamma) family is not in the gamma/epsilon -> 0 regime."""


class ScenarioError(MmsdeError, ValueError):
    """A scenario document failed to parse or validate."""


class SimulationError(MmsdeError):
    """A time step failed; ``index`` is the failing node."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
