"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`IptwFeError`.
The CLI maps :class:`ConfigError` subclasses to exit code 2 and everything else
to exit code 1.
"""


class IptwFeError(Exception):
    """Base class. ``stage`` is filled in by the pipeline when it re-raises."""

    stage: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        if self.stage:
            return f"[{self.stage}] {msg}"
        return msg


class ConfigError(IptwFeError):
    """Bad user input: malformed files, flags or configuration."""


# panel data
class ParseError(ConfigError):
    pass


class UnbalancedPanel(ConfigError):
    pass


class NonBinaryTreatment(ConfigError):
    pass


class InconsistentOutcome(ConfigError):
    pass


class LagTooLong(ConfigError):
    pass


class ShapeMismatch(IptwFeError):
    pass


class MissingOutcome(IptwFeError):
    pass


# propensity models
class EstimationError(IptwFeError):
    pass


class NoVariationAnywhere(EstimationError):
    pass


class MaxIterations(EstimationError):
    pass


class SeparationDetected(EstimationError):
    pass


# weights
class ProbabilityOutOfRange(IptwFeError):
    pass


class KTooLarge(ConfigError):
    pass


class StrategyRequiresBounds(ConfigError):
    pass


class NonConstantBaseline(IptwFeError):
    pass


class EmptyWeightSet(IptwFeError):
    pass


# marginal structural model
class RankDeficient(EstimationError):
    pass


class TooFewUnits(EstimationError):
    pass


class SingularBread(EstimationError):
    pass


class LeverageOne(EstimationError):
    pass


class NoTreatedAtT(EstimationError):
    pass


class NoControlAtT(EstimationError):
    pass


class DegeneratePropensity(EstimationError):
    pass


# simulation / reporting
class InvalidConfig(ConfigError):
    pass


class TooFewReplications(IptwFeError):
    pass


class SchemaMismatch(ConfigError):
    pass
