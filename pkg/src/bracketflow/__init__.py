"""bracketflow: simulation and verification toolkit for Lie-bracket
approximation of control-affine systems driven by oscillatory inputs."""

__version__ = "0.1.0"

from .free_algebra import (
    MultiIndex,
    NcPolynomial,
    Radical,
    bracket_polynomial,
    check_algebraic_identity,
    concat,
    lie_bracket,
    poly_mul,
)
from .vector_fields import (
    ControlAffineSystem,
    ExtendedSystem,
    Jet,
    OutputFeedbackField,
    OutputShape,
    ScalarField,
    VectorField,
    assemble_extended,
    bracket_of_pair,
    constant_field,
    hc,
    hs,
    increasing_trees,
    iterated_bracket,
    lie_derivative,
    linear_field,
    nested_lie_derivative,
    output_feedback_fields,
    output_shape,
    tree_expansion_lie_derivative,
    verify_magic_bracket,
    zero_field,
)
from .input_signals import (
    Constant,
    GdReport,
    GeneralizedDifference,
    GridFunction,
    Lam,
    OrdinaryInput,
    PiecewisePeriodic,
    PolynomialInput,
    Product,
    Sawtooth,
    Signal,
    Sinusoid,
    Sum,
    check_frequency_properties,
    closed_form_sawtooth_gd,
    closed_form_sinusoid_gd,
    closed_form_unicycle_gd,
    gd_convergence_report,
    gd_sweep,
    integrate_generalized_difference,
    make_sawtooth_inputs,
    make_sinusoid_inputs,
    make_unicycle_inputs,
    sawtooth_gd_family,
    sawtooth_limit_coefficients,
    sinusoid_gd_family,
    sinusoid_limit_coefficients,
    unicycle_gd_family,
    unicycle_limit_coefficients,
    unicycle_limit_table,
)

from .simulator import (
    ConvergenceReport,
    DistanceSpec,
    ResidualReport,
    SweepCell,
    Trajectory,
    convergence_sweep,
    driven_rhs,
    integral_expansion_residual,
    integrate,
    oscillatory_step,
    periodic_step,
    position_distance,
    position_projection,
    trajectory_distance,
)
from .stability_lab import (
    ExponentialFit,
    StabilityCell,
    StabilityProbeConfig,
    StabilityReport,
    ball_starts,
    fit_exponential,
    probe_lues,
    probe_pluas,
)
from .scenarios import (
    SCENARIOS,
    FormationScenario,
    LinearOutputScenario,
    ScenarioBundle,
    build_formation_scenario,
    build_linear_scenario,
    build_scenario,
    formation_set_distance,
    gradient_potential,
    list_scenarios,
    rigid_motion,
    rotation_invariance_check,
    unicycle_fields,
)

__all__ = [
    "MultiIndex",
    "NcPolynomial",
    "Radical",
    "bracket_polynomial",
    "check_algebraic_identity",
    "concat",
    "lie_bracket",
    "poly_mul",
    "Constant",
    "GdReport",
    "GeneralizedDifference",
    "GridFunction",
    "Lam",
    "OrdinaryInput",
    "PiecewisePeriodic",
    "PolynomialInput",
    "Product",
    "Sawtooth",
    "Signal",
    "Sinusoid",
    "Sum",
    "check_frequency_properties",
    "closed_form_sawtooth_gd",
    "closed_form_sinusoid_gd",
    "closed_form_unicycle_gd",
    "gd_convergence_report",
    "gd_sweep",
    "integrate_generalized_difference",
    "make_sawtooth_inputs",
    "make_sinusoid_inputs",
    "make_unicycle_inputs",
    "sawtooth_gd_family",
    "sawtooth_limit_coefficients",
    "sinusoid_gd_family",
    "sinusoid_limit_coefficients",
    "unicycle_gd_family",
    "unicycle_limit_coefficients",
    "unicycle_limit_table",
    "ControlAffineSystem",
    "ExtendedSystem",
    "Jet",
    "OutputFeedbackField",
    "OutputShape",
    "ScalarField",
    "VectorField",
    "assemble_extended",
    "bracket_of_pair",
    "constant_field",
    "hc",
    "hs",
    "increasing_trees",
    "iterated_bracket",
    "lie_derivative",
    "linear_field",
    "nested_lie_derivative",
    "output_feedback_fields",
    "output_shape",
    "tree_expansion_lie_derivative",
    "verify_magic_bracket",
    "zero_field",
    "ConvergenceReport",
    "DistanceSpec",
    "ResidualReport",
    "SweepCell",
    "Trajectory",
    "convergence_sweep",
    "driven_rhs",
    "integral_expansion_residual",
    "integrate",
    "oscillatory_step",
    "periodic_step",
    "position_distance",
    "position_projection",
    "trajectory_distance",
    "ExponentialFit",
    "StabilityCell",
    "StabilityProbeConfig",
    "StabilityReport",
    "ball_starts",
    "fit_exponential",
    "probe_lues",
    "probe_pluas",
    "SCENARIOS",
    "FormationScenario",
    "LinearOutputScenario",
    "ScenarioBundle",
    "build_formation_scenario",
    "build_linear_scenario",
    "build_scenario",
    "formation_set_distance",
    "gradient_potential",
    "list_scenarios",
    "rigid_motion",
    "rotation_invariance_check",
    "unicycle_fields",
    "__version__",
]
