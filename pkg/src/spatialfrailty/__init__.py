"""Spatially correlated frailty models for right-censored survival data."""

from .errors import NotPositiveDefiniteError, NumericalError, ValidationError
from .model import (CompleteDerivatives, Dataset, DerivativeBundle, ModelParams,
                    PiecewiseBaseline, complete_log_likelihood,
                    conditional_log_likelihood, cumulative_hazard, hazard_at,
                    score_and_hessian)
from .sampler import BlockGibbsConfig, FrailtyGibbs, SamplerState, adapt, sweep
from .saem import (FitResult, SaemConfig, SufficientStats, fit, m_step, sa_update,
                   step_size, truncation_check)
from .spatial import (CorrelationFactor, build_distance_matrix, correlation_derivatives,
                      correlation_matrix, group_identical_locations, haversine_km,
                      identity_factor)
from .inference import (FisherMatrix, ParameterSummary, fisher_information,
                        lrt_boundary_pvalue, marginal_log_likelihood_mc,
                        posterior_chain, standard_errors)
from .baselines import (JackknifeResult, PhFit, fit_ph, fit_univariate_frailty,
                        grouped_jackknife)
from .simulate import (SimulatedData, calibrate_censoring, default_true_params,
                       draw_event_time, draw_event_times, draw_frailties,
                       generate_scenario, invert_cumulative_hazard,
                       malaria_shape_roster, sample_locations)

__version__ = "0.1.0"
