"""Dependent quantile pyramids for simultaneous, non-crossing quantile regression."""

from .pyramid import (
    PiecewiseCdf,
    PyramidLayout,
    QuantileGrid,
    build_general_layout,
    build_oblique_layout,
    induced_cdf,
    interpolate,
    levy_distance,
    place_quantiles,
    scaled_levels,
)
from .stochastic import (
    ConcentrationRule,
    CorrelationKernel,
    correlation_matrix,
    martingale_alphas,
    sample_gp,
    u_from_z,
    v_from_u_beta,
    v_from_u_gamma,
)
from .prior import (
    MappingParams,
    QuantileSurface,
    h_transform,
    log_jacobian,
    log_prior_density,
    map_to_real,
    sample_fdqp_uniform,
)
from .likelihood import Dataset, log_likelihood, piecewise_cdf_at
from .mcmc import MCMCConfig, PosteriorDraws, TrendPrior, run_chain
from .inference import (
    LinearFit,
    linearize,
    posterior_mean_curves,
    predict_new_x,
    slope_intervals,
)

__version__ = "0.1.0"
