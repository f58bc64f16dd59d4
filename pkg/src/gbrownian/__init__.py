"""Numerics for expectations under volatility uncertainty.

The package works with the sublinear expectation generated by a
volatility band ``[sigma_lo, sigma_hi]``: values of path functionals are
computed two independent ways — backward marching of the band's nonlinear
heat equation, and suprema of seeded Monte Carlo runs over admissible
volatility controls — and the pathwise calculus connecting them
(stochastic integrals, quadratic-variation ledgers, martingale
decompositions, backward equations) is exposed with exact, re-checkable
discrete identities wherever the mathematics has one.
"""

from .core import (
    ConstantControl,
    ControlProcess,
    CylinderFunctional,
    FeedbackControl,
    GParams,
    PerturbationSchedule,
    SelfDependentControl,
    SpaceGrid,
    StepControl,
    TimeGrid,
    delta_kalpha,
    g_eps_value,
    g_value,
    sign_vol,
)
from .errors import (
    CapabilityError,
    ConfigurationError,
    DataError,
    DomainError,
    ExtrapolationError,
    GBrownianError,
    UsageError,
)
from .gbsde import (
    CylinderPathProcess,
    EquivalenceReport,
    GBSDEProblem,
    GBSDEResidualReport,
    GBSDESolution,
    a_g,
    cylinder_derivatives,
    equivalence_check,
    gbsde_residual,
    ppde_residual,
    solve_ppde,
    solve_ppde_picard,
)
from .gexp import (
    conditional_frames,
    conditional_g_expectation,
    g_expectation,
    lp_norm,
)
from .gheat import (
    ValueSurface,
    cfl_dt_max,
    check_cfl,
    derivative_fields,
    export_surface_csv,
    feedback_field,
    pde_residual,
    solve_gheat,
)
from .ito import (
    ItoDecomposition,
    MartingaleReport,
    identify_drift,
    k_process,
    martingale_decomposition,
    martingale_test,
    qn_integrand,
    qn_quadratic_variation,
    realized_qv,
    step2_limit_check,
    stochastic_integral,
)
from .mc import (
    MarginalMatchResult,
    McEstimate,
    PathBundle,
    PerturbedControl,
    block_budget_gap,
    export_bundle_csv,
    marginal_match_test,
    mc_expectation,
    perturb_control,
    qv_band_violation,
    simulate,
    sup_over_controls,
    sup_over_controls_table,
    weak_convergence_probe,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigurationError",
    "ConstantControl",
    "ControlProcess",
    "CylinderFunctional",
    "CylinderPathProcess",
    "DataError",
    "DomainError",
    "EquivalenceReport",
    "ExtrapolationError",
    "FeedbackControl",
    "GBSDEProblem",
    "GBSDEResidualReport",
    "GBSDESolution",
    "GBrownianError",
    "GParams",
    "ItoDecomposition",
    "MarginalMatchResult",
    "MartingaleReport",
    "McEstimate",
    "PathBundle",
    "PerturbationSchedule",
    "PerturbedControl",
    "SelfDependentControl",
    "SpaceGrid",
    "StepControl",
    "TimeGrid",
    "UsageError",
    "ValueSurface",
    "a_g",
    "block_budget_gap",
    "cfl_dt_max",
    "check_cfl",
    "conditional_frames",
    "conditional_g_expectation",
    "cylinder_derivatives",
    "delta_kalpha",
    "derivative_fields",
    "equivalence_check",
    "export_bundle_csv",
    "export_surface_csv",
    "feedback_field",
    "g_eps_value",
    "g_expectation",
    "g_value",
    "gbsde_residual",
    "identify_drift",
    "k_process",
    "lp_norm",
    "marginal_match_test",
    "martingale_decomposition",
    "martingale_test",
    "mc_expectation",
    "pde_residual",
    "perturb_control",
    "ppde_residual",
    "qn_integrand",
    "qn_quadratic_variation",
    "qv_band_violation",
    "realized_qv",
    "sign_vol",
    "simulate",
    "solve_gheat",
    "solve_ppde",
    "solve_ppde_picard",
    "step2_limit_check",
    "stochastic_integral",
    "sup_over_controls",
    "sup_over_controls_table",
    "weak_convergence_probe",
]
