"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, dim mismatch)."""


class DataFormatError(RuntimeError):
    """A binary container (DDEM1 / DDCK1 / DDSP1) is malformed, truncated or corrupt."""


class GradCheckError(RuntimeError):
    """Gradient check aborted, e.g. non-finite forward value."""
