"""Dual-parameterized (sparse) variational Gaussian processes.

The approximate posterior is carried in site form: prior times per-datapoint
Gaussian factors whose parameters are updated by natural-gradient steps.
Hyperparameters are learned against a Gaussian log-partition objective that
stays tight in the dual parameterization; a standard-parameterization SVGP
baseline is included for comparison.
"""

__version__ = "0.1.0"

from .data import (
    CLASSIFICATION,
    Dataset,
    REGRESSION,
    choose_inducing,
    gen_sinc_classification,
    kfold,
    load_csv,
)
from .gaussmath import (
    DegenerateGaussianError,
    GaussianExpectation,
    GaussianMoments,
    GaussianNatural,
    SeverelyIndefiniteError,
    convert,
    jittered_cholesky,
    kl_gaussian,
    record_jitter,
)
from .kernels import (
    InducingInputs,
    KernelSpec,
    MATERN52,
    SQUARED_EXPONENTIAL,
    eval_grad,
    eval_matrix,
)
from .likelihoods import (
    BernoulliProbitLikelihood,
    GaussianLikelihood,
    SiteGradient,
    site_natgrad,
)
from .qsvgp import (
    QState,
    StepOvershootError,
    prior_qstate,
    qsvgp_estep_step,
    qsvgp_marginals,
    qsvgp_standard_mstep_objective,
)
from .trainer import (
    FitResult,
    ModelSetup,
    Trace,
    TrainConfig,
    adam_step,
    fd_gradient,
    nlpd,
    run_em,
    run_em_full,
)
from .tsvgp import (
    SparseState,
    TiedSites,
    ZeroTiedStateError,
    sparse_fixed_q_elbo,
    tied_from_untied,
    tsvgp_elbo,
    tsvgp_estep_step,
    tsvgp_logZ,
    tsvgp_marginals,
    tsvgp_moments,
    tsvgp_mstep_objective,
    zero_tied,
)
from .tvgp import (
    PseudoTargets,
    SiteParams,
    exact_gp_logml,
    exact_gp_logml_grad,
    gp_regression_predict,
    tvgp_elbo,
    tvgp_estep,
    tvgp_logZ,
    tvgp_marginals,
    tvgp_mstep_objective,
    tvgp_posterior,
    zero_sites,
)

__all__ = [name for name in dir() if not name.startswith("_")]
