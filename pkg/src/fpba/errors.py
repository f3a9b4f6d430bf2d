"""Exception types shared across the package."""


class FpbaError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FpbaError):
    """A tensor argument violates a shape, dtype, range, or finiteness contract."""


class InvalidParameterError(FpbaError):
    """A configuration value is out of its documented range."""


class InvalidDatasetError(FpbaError):
    """A dataset is empty, unbalanced, duplicated, or otherwise unusable."""


class CapabilityError(FpbaError):
    """The given model cannot provide what was asked (e.g. no gradient path)."""


class PreconditionError(FpbaError):
    """An operation was called before its required setup step ran."""


class CheckpointError(FpbaError):
    """A checkpoint file is missing, malformed, or inconsistent with its base."""


class DivergedChainError(FpbaError):
    """A sampling chain produced non-finite values; carries step diagnostics."""
