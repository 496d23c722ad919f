"""Sharp partial-identification bounds for transported quantile treatment effects."""
from __future__ import annotations

__version__ = "0.1.0"

from .bounds import (CdfBoundProcess, CellNuisances, FrontierGrid, QteHull, ThresholdGrid, frontier_scan,
                     marginal_cdf_bounds, qte_hull, quantile_bounds)
from .envelope import (DomainError, SensitivityPair, Side, TieError, c_envelope, directional_derivative,
                       envelope_derivatives, g_nested, product_relaxation, t_envelope)
from .estimation import TwoSampleData, Variant, estimate_nuisances, fit_process, one_step_estimate
from .inference import build_bands, invert_bands, multiplier_critical, subsample_critical
from .lp import FiniteDist, solve_single_layer, solve_two_layer
from .tilts import nested_exact_tilt

__all__ = [
    "CdfBoundProcess", "CellNuisances", "DomainError", "FiniteDist", "FrontierGrid", "QteHull",
    "SensitivityPair", "Side", "ThresholdGrid", "TieError", "TwoSampleData", "Variant", "build_bands",
    "c_envelope", "directional_derivative", "envelope_derivatives", "estimate_nuisances", "fit_process",
    "frontier_scan", "g_nested", "invert_bands", "marginal_cdf_bounds", "multiplier_critical",
    "nested_exact_tilt", "one_step_estimate", "product_relaxation", "qte_hull", "quantile_bounds",
    "solve_single_layer", "solve_two_layer", "subsample_critical", "t_envelope",
]
