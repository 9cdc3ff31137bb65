"""
qfexp: a numerical laboratory for quadratic nonlinear conditional expectations.

Solve quadratic-driver backward equations on simulated Brownian ensembles,
verify the expectation axioms and stability (domination) properties, run the
penalization route to compensators of nonlinear sub/supermartingales, and
recover the driver behind a black-box conditional expectation from increment
probes.
"""

from .stochastic import (
    TimeGrid, PathEnsemble, StoppingTime,
    make_grid, simulate_brownian, stochastic_integral,
    first_hitting_time, deterministic_stopping_time,
)
from .regression import RegressionBasis, polynomial_basis, piecewise_basis, condexp_regress, DegenerateBasisError
from .generators import (
    Generator, GeneratorPair,
    canonical_generator, entropic_generator, lipschitz_dominator, zero_generator,
    custom_generator, check_h2, check_local_lipschitz,
)
from .bsde import (
    TerminalCondition, BsdeSolution, AffinePart,
    solve_bsde, solve_shifted, conditional_g_expectation,
    cole_hopf_oracle, deterministic_gexp_affine,
    DivergenceError, BasisInadequacyError,
)
from .operators import (
    ExpectationOperator, GExpectation, LinearExpectation,
    AffineFormulaExpectation, ExternalOperator,
    ConstantBiasOperator, StateGainOperator,
)
from .bmo import (
    BmoEstimate, GirsanovKernel, DominationConstants,
    bmo_norm, check_energy_inequality, phi_alpha, solve_p_for_bmo,
    stochastic_exponential, check_reverse_holder, bmo_bound_from_solution,
    check_lp_domination, check_linf_domination, check_one_sided_domination,
    domination_failure_demo,
)
from .decomposition import (
    FixedPointProblem, PenalizationRun, DecompositionResult,
    solve_fixed_point, penalize, doob_meyer_decompose, extract_generator_pair,
    NonConvergenceError,
)
from .representation import (
    CanonicalProcess, RecoveredGenerator, MuFit,
    canonical_process, recover_generator, fit_canonical_mu,
    check_h6_independence, check_h4_domination, check_recovered_lipschitz,
    verify_representation,
)

__version__ = "0.1.0"
