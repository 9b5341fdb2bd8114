"""Lyapunov spectra of orthogonal-plus-Gaussian matrix cocycles."""

from .ensembles import CocycleSpec, RngStream
from .estimators import (
    Method,
    SpectrumEstimate,
    asymptotic_spectrum,
    estimate_approx_mc,
    estimate_direct,
    estimate_exact_mc,
    gap_conjecture_report,
    quadrature_oracle_d1,
    sigma_equivalence_test,
    simulate_sigma_chain,
    theta_log_moment,
)

__all__ = [
    "CocycleSpec",
    "Method",
    "RngStream",
    "SpectrumEstimate",
    "asymptotic_spectrum",
    "estimate_approx_mc",
    "estimate_direct",
    "estimate_exact_mc",
    "gap_conjecture_report",
    "quadrature_oracle_d1",
    "sigma_equivalence_test",
    "simulate_sigma_chain",
    "theta_log_moment",
]
