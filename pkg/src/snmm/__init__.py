"""Doubly robust G-estimation of multiplicative structural nested mean models
for irregularly observed, zero-inflated multivariate outcomes."""

__version__ = "0.1.0"

from .dgp import DgpConfig, Simulation, simulate, simulate_panel
from .estimator import CausalSpec, GEstimate, fit_pipeline, psi_equation, psi_jacobian, sandwich, solve_psi
from .exceptions import SNMMError
from .montecarlo import MetricsTable, ScenarioConfig, run_replication, run_study, summarize
from .nuisance import NuisanceSet, NuisanceSpec, fit_cox, fit_outcome, fit_propensity
from .panel import CovariateFrame, Panel, build_features, read_panel_csv, write_panel_csv

__all__ = [
    "CausalSpec",
    "CovariateFrame",
    "DgpConfig",
    "GEstimate",
    "MetricsTable",
    "NuisanceSet",
    "NuisanceSpec",
    "Panel",
    "SNMMError",
    "ScenarioConfig",
    "Simulation",
    "build_features",
    "fit_cox",
    "fit_outcome",
    "fit_pipeline",
    "fit_propensity",
    "psi_equation",
    "psi_jacobian",
    "read_panel_csv",
    "run_replication",
    "run_study",
    "sandwich",
    "simulate",
    "simulate_panel",
    "solve_psi",
    "summarize",
    "write_panel_csv",
]
