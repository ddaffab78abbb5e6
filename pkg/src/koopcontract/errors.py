"""Exception types shared across the package."""


class ExprSyntaxError(ValueError):
    def __init__(self, message, source="", pos=0):
        self.source = source
        self.pos = pos
        super().__init__(f"{message} at position {pos}: {source!r}")


class UnknownSymbolError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class DomainError(ArithmeticError):
    """Raised when an expression is evaluated outside its domain.

    ``point`` is filled in by grid routines once the offending sample is known.
    """

    def __init__(self, message, point=None):
        self.point = point
        super().__init__(message if point is None else f"{message} at point {list(point)}")


class BlowUpError(RuntimeError):
    def __init__(self, time, message="non-finite state encountered"):
        self.time = time
        super().__init__(f"{message} at t={time:.6g}")


class ConvergenceError(RuntimeError):
    pass


class NotStableError(ValueError):
    def __init__(self, abscissa, message="matrix is not Hurwitz"):
        self.abscissa = abscissa
        super().__init__(f"{message} (spectral abscissa {abscissa:.6g})")


class NotStabilizableError(ValueError):
    def __init__(self, eigenvalue):
        self.eigenvalue = eigenvalue
        super().__init__(f"(A, B) not stabilizable: uncontrollable mode {eigenvalue:.6g}")


class RankDeficientError(ValueError):
    pass


class MatrixLogError(ValueError):
    pass


class TailNotConvergedError(RuntimeError):
    def __init__(self, estimate, tol):
        self.estimate = estimate
        super().__init__(f"quadrature tail estimate {estimate:.3g} exceeds {tol:.3g}; increase the horizon")


class GridTooCoarseError(RuntimeError):
    pass


class PreconditionError(ValueError):
    pass
