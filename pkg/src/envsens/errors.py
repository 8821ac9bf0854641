"""Exception hierarchy shared by every module of the package."""


class EnvsensError(Exception):
    """Base class for all errors raised by envsens."""


class ExpressionError(EnvsensError):
    pass


class ParseError(ExpressionError):
    """Syntax error in an expression; ``offset`` is a byte offset into the source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset
        self.reason = message


class UnboundVariableError(ExpressionError):
    pass


class DomainError(ExpressionError):
    pass


class NonDifferentiableError(ExpressionError):
    pass


class DependentVectorsError(EnvsensError):
    """Input vectors are (numerically) linearly dependent."""


class OutsideSpanError(EnvsensError):
    """A vector does not lie in the span of a basis within tolerance."""


class ConstraintQualificationError(DependentVectorsError):
    """Active constraint gradients are linearly dependent."""


class SolverError(EnvsensError):
    pass


class NoKktPointError(SolverError):
    def __init__(self, message: str, best_residual: float = float("inf")):
        super().__init__(message)
        self.best_residual = best_residual


class ActiveSetBudgetError(SolverError):
    pass


class ProblemFileError(EnvsensError):
    pass
