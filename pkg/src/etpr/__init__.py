"""Extended t-process regression (eTPR).

A heavy-tailed generalisation of Gaussian process regression in which each
curve carries a latent inverse-gamma scale.  Predictions keep the GP BLUP form
while the hyperparameter scores downweight curves that fit poorly.
"""

__version__ = "0.1.0"

from .emtd import (
    UNDEFINED,
    EmtdParams,
    IgParams,
    emtd_conditional,
    emtd_linear_map,
    emtd_log_density,
    emtd_marginal,
    emtd_sample,
    ig_log_density,
    make_rng,
    r_posterior,
)
from .errors import (
    DimensionError,
    EtprError,
    HessianNotPD,
    InvalidOptions,
    NumericalError,
    NuOutOfDomain,
    RankError,
    SingularScale,
    UnknownCurve,
)
from .estimate import FitOptions, FittedModel, fit, profile_nu, standard_errors
from .kernels import KernelConfig, KernelTerm, kernel_eval, kernel_grad, lin, matern, rq, se, vm
from .model import (
    Curve,
    Dataset,
    ModelParams,
    bounded_influence_probe,
    hessian_beta,
    log_marginal_likelihood,
    score_beta,
    score_nu,
)
from .predict import Prediction, blup_training, posterior_process, predict_f, predict_y
