"""Generalized profiling estimation of ODE parameters with penalized B-splines."""

from .bspline import KnotVector, design_matrix, equal_knot_vector, eval_basis, make_knot_vector
from .cascade import (
    FitResult,
    ObservationSet,
    ProfilingProblem,
    criterion_F,
    dF_dlambda,
    fit_model,
    init_weights_and_starts,
    inner_solve,
    middle_solve,
    outer_solve,
)
from .knots import KnotSearchConfig, merge_knot_sets, search_knots
from .model import (
    FunctionModel,
    GlucoseInsulinModel,
    InputFunctions,
    LinearModel,
    NaturalParams,
    OdeModel,
    derived_quantities,
)
from .odesolve import solve
from .simulate import StudyConfig, run_study

__version__ = "0.1.0"
