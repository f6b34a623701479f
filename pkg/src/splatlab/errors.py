"""Exception types shared across the toolkit."""


class SplatError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(SplatError, ValueError):
    """Non-finite or out-of-contract argument."""


class ParseError(SplatError, ValueError):
    """Malformed input file; the message names the offending field."""


class GrazingRayError(SplatError, ArithmeticError):
    """Ray nearly parallel to a Gaussian's plane; intersection depth undefined."""


class DegenerateFitError(SplatError, ValueError):
    """Robust fit left fewer than two inliers."""


class RankDeficiencyError(SplatError, ValueError):
    """Fit inputs carry no spread; scale is unidentifiable."""


class EmptyPriorError(SplatError, ValueError):
    """Synthetic scene produced no valid pixels for this camera."""


class IncompleteMergeError(SplatError, ValueError):
    """Block merge is missing provenance indices; message lists the gaps."""


class NumericError(SplatError, ArithmeticError):
    """Non-finite value surfaced mid-computation."""


class ConfigError(SplatError, ValueError):
    """Unknown key or invalid value in a configuration file."""
