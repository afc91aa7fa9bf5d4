"""Solver suite for a degenerate forward-backward parabolic equation.

The underlying model is scalar transport u u_x - u_yy = f for velocity
fields close to the linear shear u = y on a rectangle, with inflow data on
the two half-edges where the flow enters.  The package provides the
linearized mixed-type solver, the dual (adjoint) states with their jump
conditions across the degenerate line, the self-similar corner profiles,
the orthogonality functionals that characterize solvable data, a corrected
fixed-point iteration for the nonlinear problem, and verification drivers.
"""

from .domain import (
    DataTriple,
    Domain,
    Field,
    Grid,
    NormKind,
    Trace,
    build_grid,
    diff,
    inner_product_H,
    norm,
)
from .linearfb import (
    CoefficientSet,
    DualProfile,
    LinearProblem,
    SolveStats,
    solve_adjoint_with_jumps,
    solve_linear,
)
from .profiles import (
    ProfileFunction,
    SelfSimilarCoords,
    SingularProfile,
    fit_singular_strength,
    g0_kummer,
    g0_ode_solve,
    get_profile,
    profile_field_v0,
    profile_to_csv,
    singular_profile,
)
from .ortho import (
    CorrectorBasis,
    Decomposition,
    OrthoFunctional,
    build_corrector_basis,
    decompose,
    derived_data,
    ell_direct,
    ell_dual,
    ell_lipschitz_probe,
)
from .nonlinear import (
    IterationState,
    ManifoldPoint,
    change_of_variables,
    initial_guess,
    iterate_step,
    manifold_point,
    nonlinear_solve,
    orthogonal_base,
)
from .verify import (
    ManufacturedCase,
    StudyReport,
    dichotomy_experiment,
    nonlinear_case,
    run_manufactured,
    shear_linear_case,
    symmetry_check,
)
from .cli import expression_eval, main, run, validate_config

__version__ = "0.1.0"
