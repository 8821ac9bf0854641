"""Envelope-theorem sensitivities of value functions for parameterized optimization problems."""

from .calcvar import (
    DiscretizedProblem,
    DrResidual,
    Trajectory,
    VariationalProblem,
    VariationalSolution,
    constraint_qualification,
    dubois_reymond_residual,
    envelope_gradient_variational,
    envelope_variational,
    functional_gradient_param,
    functional_gradient_state,
    functional_values,
    solve_variational,
)
from .errors import (
    ActiveSetBudgetError,
    ConstraintQualificationError,
    DependentVectorsError,
    DomainError,
    EnvsensError,
    ExpressionError,
    NoKktPointError,
    NonDifferentiableError,
    OutsideSpanError,
    ParseError,
    ProblemFileError,
    SolverError,
    UnboundVariableError,
)
from .expr import derivatives, evaluate, grad, parse, to_source
from .linalg import GsBasis, coordinates, gram_schmidt, independence_margin, project
from .static_opt import (
    AffineRestriction,
    Envelope,
    KktPoint,
    Multipliers,
    ParameterizedNLP,
    SolverOptions,
    active_set,
    envelope_directional,
    envelope_gradient,
    multipliers,
    restrict_affine,
    solve,
)
from .verify import EnvelopeReport, FdEstimate, FdProbeError, SweepTrace, compare_envelope, fd_directional, sweep

__version__ = "0.1.0"
