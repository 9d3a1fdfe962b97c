"""Adaptive multi-grade deep learning for oscillatory Fredholm equations."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CorruptCheckpoint,
    DimensionMismatch,
    GridMismatch,
    InvalidConfig,
    NoConvergence,
    NonFiniteLoss,
    NoneSolution,
    OscidalError,
    SingularMatrix,
    ZeroDenominator,
)
from .problem import (  # noqa: F401
    ComplexGridFunction,
    ExactSolutionSpec,
    KernelSpec,
    ProblemSpec,
    compute_rhs,
    eval_exact,
)
from .operator import (  # noqa: F401
    DiscreteOperator,
    OperatorMatrix,
    QuadratureConfig,
    apply_discrete_operator,
    assemble_matrix,
    collocation_grid,
    estimate_quadrature_error,
    quad_node_count,
    quadrature_error_bound,
    reference_solve,
)
from .mgdl import AmgdlConfig, GradeStack, TrainingRun, prepare, run_amgdl, run_sgdl  # noqa: F401
