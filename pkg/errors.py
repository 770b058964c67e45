"""Exception types shared by the analysis, model and CLI modules."""


class RhythmError(Exception):
    """Base class for every error raised on purpose by this project."""


class ArgumentError(RhythmError, ValueError):
    """A caller passed arguments that violate an operation's preconditions."""


class ValidationError(RhythmError, ValueError):
    """Data failed an invariant check (NaN/Inf, too short, bad manifest)."""


class FormatError(RhythmError, ValueError):
    """A motion or checkpoint file could not be parsed."""


class DivergenceError(RhythmError, RuntimeError):
    """Training produced a non-finite loss."""
