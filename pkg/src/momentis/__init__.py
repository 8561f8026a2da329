"""Moment-constrained importance sampling for latent Gaussian models.

Construct Gaussian and mixture importance densities whose weights provably
possess the first n moments, evaluate likelihoods of non-Gaussian state
space, panel and mixed models, diagnose weight-tail behavior, and drive
pseudo-marginal MCMC.
"""

from .band_linalg import (BandCholesky, SymBandMatrix, factorize, log_density,
                          sample_gaussian, smallest_eigenvalue)
from .errors import (ConstantChain, DegenerateSample, Diverged, InsufficientTail,
                     InvalidInput, MomentisError, NotPositiveDefinite)
from .estimators import (GpdFit, IactResult, WeightSample, estimate_likelihood,
                         iact, ksc_test, ratio_estimate, weight_variance_ratio)
from .inference import (McmcConfig, McmcResult, ParameterVector, SamplerSpec,
                        estimate_panel_likelihood, estimate_ssm_likelihood,
                        log_prior, run_pmmh)
from .models import (BernoulliToyModel, GlmmPoissonModel, PanelAr1Model,
                     PoissonSsmModel, bernoulli_taylor_proposal, glmm_newton_mode,
                     log_joint)
from .proposal import (GaussianProposal, MixtureProposal, MomentOrder,
                       StudentTProposal, build_mixture, check_moment_condition,
                       modify_precision)
from .statespace import (Ar1Spec, BlockAr1Spec, SpdkFit, ar1_precision,
                         build_ssm_mixture, constant_variance_bound, impose_block,
                         impose_scalar, spdk_fit, sylvester_check)

__version__ = "0.1.0"
