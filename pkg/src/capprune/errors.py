"""Exception hierarchy shared by all capprune modules."""


class CapPruneError(Exception):
    """Base class for every error raised by capprune."""


class ShapeError(CapPruneError, ValueError):
    """Array or layer shapes are inconsistent."""


class NotPositiveDefiniteError(CapPruneError, ArithmeticError):
    """A matrix expected to be SPD failed factorization (singular or indefinite)."""


class FormatError(CapPruneError):
    """A model, dataset or statistics file is malformed."""


class PruneError(CapPruneError):
    """A pruning request cannot be carried out on the given model."""


class DeadActivationError(CapPruneError):
    """All sampled activations carry zero weight; weighted statistics are undefined."""
