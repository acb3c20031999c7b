"""Exception hierarchy shared by all co2 modules."""


class CO2Error(Exception):
    """Base class for all errors raised by this package."""


class ZeroVector(CO2Error):
    """Vector has (numerically) zero norm and cannot be normalized."""


class NonPositiveTemperature(CO2Error):
    """Softmax temperature must be strictly positive."""


class LengthMismatch(CO2Error):
    """Two vectors that must share a length do not."""


class SupportViolation(CO2Error):
    """KL divergence undefined: p[i] > 0 where q[i] = 0."""


class InvalidEpsilon(CO2Error):
    """Label-smoothing epsilon outside [0, 1)."""


class ShapeMismatch(CO2Error):
    """Parameter or gradient structures have incompatible shapes."""


class BatchTooLarge(CO2Error):
    """Enqueued batch exceeds queue capacity."""


class IndivisibleCapacity(CO2Error):
    """Queue capacity is not a multiple of the enqueued batch size."""


class BadMagic(CO2Error):
    """File does not start with the expected magic bytes."""


class TruncatedFile(CO2Error):
    """File ends before a declared section is complete."""


class DimensionMismatch(CO2Error):
    """Stored dimensions disagree with the declared header."""


class BadPath(CO2Error):
    """A required input path does not exist or is not readable."""


class DegenerateSplit(CO2Error):
    """A class present in the evaluation split is absent from training."""


class InsufficientLabels(CO2Error):
    """Label fraction too small to cover every class at least once."""


class EmptyStream(CO2Error):
    """A metrics stream with no records cannot be summarized."""


class MalformedLine(CO2Error):
    """A metrics file line is not valid JSON or misses required keys."""


class SinkFailure(CO2Error):
    """Writing to the metrics sink failed."""


class ConfigError(CO2Error):
    """Experiment configuration is invalid (unknown key, bad value)."""
