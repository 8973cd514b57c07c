"""Exception hierarchy shared by every subpackage."""


class QuantToolkitError(Exception):
    pass


class ShapeError(QuantToolkitError, ValueError):
    pass


class ContractError(QuantToolkitError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(QuantToolkitError, ArithmeticError):
    pass


class IllConditionedError(NumericError):
    """Raised when a spectral denominator gets too close to zero.

    ``min_gap`` carries the smallest |d_i + e_j| that was found.
    """

    def __init__(self, message: str, min_gap: float):
        super().__init__(message)
        self.min_gap = min_gap


class DegenerateError(NumericError):
    pass
