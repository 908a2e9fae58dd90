"""Exception hierarchy.

Two families matter to the CLI: :class:`HypothesisViolation` (a mathematical
precondition of an experiment does not hold, exit code 2) and everything else
derived from :class:`BsdeLabError` (infrastructure, exit code 1).
"""


class BsdeLabError(Exception):
    """Base class for all library errors."""


class DomainError(BsdeLabError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ResourceBudgetError(BsdeLabError, MemoryError):
    """Requested ensemble is larger than the configured memory budget."""


class DimensionMismatch(BsdeLabError, ValueError):
    pass


class RegressionRankError(BsdeLabError):
    pass


class InnerIterationDivergence(BsdeLabError):
    def __init__(self, node: int, message: str = ""):
        self.node = node
        super().__init__(message or f"implicit step failed to converge at node {node}")


class QuadratureError(BsdeLabError):
    pass


class EffectiveSampleSizeError(BsdeLabError):
    pass


class ConfigError(BsdeLabError):
    pass


class HypothesisViolation(BsdeLabError):
    """A hypothesis of the experiment (or theorem) being exercised fails."""


class SubcriticalError(HypothesisViolation, DomainError):
    """The integrability weight mu does not exceed b * sqrt(horizon)."""


class BoundViolation(HypothesisViolation):
    """A process declared bounded by b exceeds b."""


class MissingConstant(BsdeLabError, ValueError):
    """A checker needs a constant that the generator does not declare."""


class InadmissibleTerminal(HypothesisViolation):
    pass
