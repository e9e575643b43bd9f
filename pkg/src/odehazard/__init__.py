"""Survival hazard functions defined as solutions of autonomous ODE systems."""

__version__ = "0.1.0"

from .data import DataError, SurvivalDataset, censoring_summary, kaplan_meier, load_dataset, write_dataset
from .inference import (
    Chain,
    McmcConfig,
    MleResult,
    PriorSpec,
    effective_sample_size,
    fit_mle,
    iat,
    log_likelihood,
    log_posterior,
    log_prior,
    run_mcmc,
)
from .models import (
    HazardResponseModel,
    HazardResponseParams,
    LogisticModel,
    LogisticParams,
    SteadyCase,
    SteadyState,
    hazard_response_system,
    logistic_cumhaz,
    logistic_hazard,
    logistic_quantile,
    logistic_survival,
    make_model,
    steady_state,
)
from .ode import IntegrationError, OdeSystem, Trajectory, check_jacobian, integrate_at, integrate_grid
from .predictive import (
    PredictiveCurve,
    equilibrium_summary,
    pointwise_bands,
    predictive_hazard,
    predictive_survival,
)
from .simulation import (
    GridInverter,
    ScenarioConfig,
    administrative_censor,
    build_grid_inverter,
    find_censoring_time,
    run_scenario,
    simulate_by_inversion,
    simulate_logistic,
)
