"""Desk-scale exact laboratory for demand-based equilibrium stock prices.

Everything lives on a full binary lattice carrying a discrete Brownian
filtration, where conditional expectations, martingale representation and
stochastic integrals are exact.  On top of it sit an explicit equilibrium
pricer, two solvers for the associated coupled quadratic backward system,
exact stopping-time norms, and a verification suite that turns the model's
structural inequalities into executable checks.
"""

from .lattice import (
    AdaptedProcess,
    ExponentialGuardError,
    Lattice,
    LatticeSizeError,
    MartingaleError,
    PredictableProcess,
    build_lattice,
    conditional_expectation,
    is_martingale,
    martingale_defect,
    martingale_representation,
    stochastic_exponential,
    stochastic_integral,
)
from .scenario import (
    ConstantDemand,
    Digital,
    LinearClipped,
    LocalizedDemand,
    LocalizedDividend,
    MarketConfig,
    NegativeSignOfB,
    PiecewiseConstantDemand,
    SignOfBT,
    StoppingTime,
    TableDemand,
    TableDividend,
    evaluate_demand,
    evaluate_dividend,
    evaluate_market,
    hitting_time_tau,
    sign_plus,
)
from .pricer import (
    EquilibriumSolution,
    NumericalError,
    gain_process,
    localize,
    price_equilibrium,
    price_raw,
)
from .bsde import (
    AssembledMeasure,
    BsdeSolution,
    ContractionReport,
    IterationDiagnostics,
    assemble,
    contraction_report,
    driver,
    driver_growth_bound,
    picard_map,
    solve_explicit,
    solve_picard,
)
from .norms import (
    NormReport,
    bmo_norm,
    bmo_norm_rv,
    bmo_p_norm,
    h_bmo_norm,
    h_norm,
    measure_kappa,
    orlicz_h,
    stacked_integrand,
    sup_norm,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptedProcess",
    "AssembledMeasure",
    "BsdeSolution",
    "ConstantDemand",
    "ContractionReport",
    "Digital",
    "EquilibriumSolution",
    "ExponentialGuardError",
    "IterationDiagnostics",
    "Lattice",
    "LatticeSizeError",
    "LinearClipped",
    "LocalizedDemand",
    "LocalizedDividend",
    "MarketConfig",
    "MartingaleError",
    "NegativeSignOfB",
    "NormReport",
    "NumericalError",
    "PiecewiseConstantDemand",
    "PredictableProcess",
    "SignOfBT",
    "StoppingTime",
    "TableDemand",
    "TableDividend",
    "assemble",
    "bmo_norm",
    "bmo_norm_rv",
    "bmo_p_norm",
    "build_lattice",
    "conditional_expectation",
    "contraction_report",
    "driver",
    "driver_growth_bound",
    "evaluate_demand",
    "evaluate_dividend",
    "evaluate_market",
    "gain_process",
    "h_bmo_norm",
    "h_norm",
    "hitting_time_tau",
    "is_martingale",
    "localize",
    "martingale_defect",
    "martingale_representation",
    "measure_kappa",
    "orlicz_h",
    "picard_map",
    "price_equilibrium",
    "price_raw",
    "sign_plus",
    "solve_explicit",
    "solve_picard",
    "stacked_integrand",
    "stochastic_exponential",
    "stochastic_integral",
    "sup_norm",
]
