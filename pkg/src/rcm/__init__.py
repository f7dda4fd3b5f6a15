"""
Random covariance model.

Study covariances are modelled as inverse-Wishart draws around a common
scale matrix Ψ with degrees of freedom ν; observations are Gaussian given
their study's covariance. The package fits (Ψ, ν) by maximum likelihood,
tests homogeneity, benchmarks estimators and turns fits into feature modules.
"""

from .errors import (
    BracketError,
    DimensionMismatch,
    DomainError,
    MaxIterationsExceeded,
    MissingValueError,
    NotPositiveDefinite,
    NuSaturationWarning,
    ParseError,
    RcmError,
    SampleSizeWarning,
    SchemaError,
)
from .estimators import (
    FitResult,
    default_init,
    em_step,
    estimate_approx_mle,
    estimate_em,
    estimate_pooled,
    fit_rcm,
    maximize_nu,
)
from .inference import FitConfig, HomogeneityTest, icc, icc_montecarlo, invwishart_cov, permutation_p_value, permutation_test
from .ingest import ModuleAssignment, StudySet, cluster_modules, load_studies, select_top_variance, to_correlation, to_study_data
from .likelihood import StudyData, grad_psi, log_likelihood, log_likelihood_fast, profile_nu
from .matrixcore import SpdMatrix, as_spd, cholesky, log_det, log_multigamma, spd_inverse
from .sampling import (
    RcmParams,
    SyntheticDataset,
    compound_symmetry,
    generate_rcm_dataset,
    make_rng,
    sample_inv_wishart,
    sample_mvn,
    sample_wishart,
)

__version__ = "0.1.0"
