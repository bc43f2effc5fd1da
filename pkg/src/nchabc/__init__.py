"""Approximate Bayesian computation with nonlinear heteroscedastic regression adjustment."""

__version__ = "0.1.0"

from .stats import (  # noqa: E402
    QuantileSet,
    ResponseTransform,
    Rng,
    epanechnikov,
    f_tail_p,
    inverse_transform,
    mad_scale,
    transform,
    weighted_quantile,
)
from .regression import (  # noqa: E402
    FfnnModel,
    LocalLinearFit,
    MeanVarNets,
    TrainConfig,
    ffnn_forward,
    ffnn_loss_and_gradient,
    fit_local_linear,
    fit_mean_var,
    train_net,
)
from .simulators import (  # noqa: E402
    ExpansionModel,
    GenerativeModel,
    InfiniteSitesModel,
    LinearGaussianModel,
    QueueModel,
    make_model,
    prior_draw,
)
from .engine import (  # noqa: E402
    ReferenceTable,
    WeightedPosterior,
    build_reference_table,
    distances,
    locl_posterior,
    nch_posterior,
    posterior_quantiles,
    rejection_posterior,
    select_tolerance,
)
from .adaptive import AnchConfig, SupportRegion, anch_run, estimate_support, sample_truncated_prior  # noqa: E402
