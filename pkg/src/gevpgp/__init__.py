"""Joint spatial modelling of block maxima and directions.

A latent-Gaussian-process GEV layer for the maxima is coupled with a
projected Gaussian process for the angular component; inference runs through
a data-augmented Metropolis-within-Gibbs sampler, with kriging-style
posterior prediction, circular summaries and WAIC model scoring on top.
"""

from .errors import GevpgpError, ParameterError, SingularityError, ValidationError
from .extremes import GevParams, fit_gev_pwm, gev_cdf, gev_logpdf, gev_quantile, gev_sample
from .model import (
    CovSpec,
    Dataset,
    GammaPrior,
    GaussianPrior,
    InvGammaPrior,
    McmcSettings,
    ModelSpec,
    Priors,
    Term,
)
from .numerics import (
    AngularCovParams,
    CovParams,
    SpdMatrix,
    build_angular_cov,
    build_gev_cov,
    inverse_gamma_sample,
    lognormal_step,
    mvn_conditional,
    mvn_logpdf,
    mvn_sample,
    powered_exponential,
)
from .pgp import (
    AngularObservation,
    angle_from_xy,
    joint_logdensity,
    marginal_angle_logpdf,
    sample_pgp,
)
from .sampler import (
    ChainState,
    TuningState,
    gibbs_step,
    init_state,
    regenerate_data,
    run_chain,
    sample_prior_state,
)
from .trace import Trace

__version__ = "0.1.0"
