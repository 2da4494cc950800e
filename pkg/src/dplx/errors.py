"""Exception taxonomy shared by every dplx module."""


class DplxError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DplxError):
    """Operand shapes are incompatible for the requested operation."""


class RankError(ShapeError):
    """A tensor has the wrong rank (e.g. non-scalar loss in backward)."""


class ConfigError(DplxError):
    """A configuration value is out of range, unknown, or inconsistent."""


class DataError(DplxError):
    """Corpus or batch content violates its contract (ids, lengths, budget)."""


class StepError(DplxError):
    """A diffusion step index lies outside 1..T."""


class InfeasibleAlignmentError(DplxError):
    """The CTC lattice admits no alignment for the given lengths."""


class FormatError(DplxError):
    """A parameter file is corrupt or not in the expected format."""


class CheckpointError(DplxError):
    """A checkpoint does not match the current model or config."""


class TrainingDivergedError(DplxError):
    """A loss became NaN or infinite during training."""
