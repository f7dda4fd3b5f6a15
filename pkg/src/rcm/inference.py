"""
Interpreting ν: intra-class correlation and a permutation test of homogeneity.

The ICC of the model is ``1 / (ν - p)``: the share of the variance of a
covariance entry ``S_ij`` that is between studies. It depends on ν only.

The test of ``H0: ν = ∞`` (all studies share one covariance matrix) refits
the model on datasets whose rows have been shuffled between studies. Small
``ν̂`` is evidence against H0.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike

from .errors import DomainError, MaxIterationsExceeded, NuSaturationWarning
from .estimators import ESTIMATORS, FitResult, fit_rcm
from .likelihood import StudyData
from .matrixcore import SpdMatrix, as_spd
from .sampling import sample_inv_wishart, study_rng

__all__ = [
    "FitConfig",
    "HomogeneityTest",
    "icc",
    "invwishart_cov",
    "icc_montecarlo",
    "permutation_p_value",
    "permutation_test",
]


def icc(nu: float, p: int) -> float:
    """Intra-class correlation ``1 / (ν - p)``.

    The underlying variances exist only for ν > p + 3, but the formula is
    returned for any ν > p.
    """
    if not nu > p:
        raise DomainError(f"ICC needs nu > p = {p}, got {nu}")
    return 1.0 / (nu - p)


def invwishart_cov(psi: SpdMatrix | ArrayLike, nu: float, indices: tuple[int, int, int, int]) -> float:
    """``Cov(Σ_ij, Σ_kl)`` for ``Σ ~ W^{-1}_p(Ψ, ν)``.

    ::

        [2 Ψ_ij Ψ_kl + (ν-p-1)(Ψ_ik Ψ_jl + Ψ_il Ψ_kj)] / [(ν-p)(ν-p-1)^2 (ν-p-3)]

    Indices are zero-based. Requires ν > p + 3.
    """
    psi = as_spd(psi).entries
    p = psi.shape[0]
    if not nu > p + 3:
        raise DomainError(f"inverse Wishart fourth moments need nu > p + 3 = {p + 3}, got {nu}")
    i, j, k, l = indices
    a = nu - p
    num = 2.0 * psi[i, j] * psi[k, l] + (a - 1.0) * (psi[i, k] * psi[j, l] + psi[i, l] * psi[k, j])
    return float(num / (a * (a - 1.0) ** 2 * (a - 3.0)))


def icc_montecarlo(psi: SpdMatrix | ArrayLike, nu: float, draws: int, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of ``Var(Σ_ij) / Var(S_ij)``, averaged over pairs ``i <= j``.

    Simulates ``Σ ~ W^{-1}(Ψ, ν)`` and a single-observation scatter
    ``S = x x^T`` with ``x | Σ ~ N(0, Σ)``.
    """
    psi = as_spd(psi)
    p = psi.dim
    if not nu > p + 3:
        raise DomainError(f"ICC variances need nu > p + 3 = {p + 3}, got {nu}")
    if draws < 2:
        raise DomainError("need at least two draws")
    sig = sample_inv_wishart(rng, psi, nu, size=int(draws))
    chol = np.linalg.cholesky(sig)
    x = np.einsum("sij,sj->si", chol, rng.standard_normal((int(draws), p)))
    s = x[:, :, None] * x[:, None, :]
    iu = np.triu_indices(p)
    v_sigma = np.var(sig[:, iu[0], iu[1]], axis=0, ddof=1)
    v_s = np.var(s[:, iu[0], iu[1]], axis=0, ddof=1)
    return float(np.mean(v_sigma / v_s))


def permutation_p_value(nu_obs: float, null_nus: Sequence[float]) -> float:
    """``(1 + #{ν0 < ν_obs}) / (N + 1)``; small ν̂ is the critical direction."""
    null = np.asarray(null_nus, dtype=float)
    return (1.0 + float(np.sum(null < nu_obs))) / (null.size + 1.0)


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by the observed fit and the permutation refits."""

    eps: float = 1e-6
    max_iter: int = 1000
    inner: str = "em"
    null_max_iter: int = 200
    center: bool = True

    def __post_init__(self) -> None:
        if self.inner not in ESTIMATORS:
            raise DomainError(f"unknown inner estimator {self.inner!r}")


@dataclass
class HomogeneityTest:
    nu_obs: float
    null_nus: list[float]
    p_value: float
    n_permutations: int
    seed: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _studies_to_data(studies: Sequence[np.ndarray], center: bool) -> list[StudyData]:
    return [StudyData.from_observations(x, center=center) for x in studies]


def _fit_nu(studies, config: FitConfig, max_iter: int) -> FitResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MaxIterationsExceeded)
        warnings.simplefilter("ignore", NuSaturationWarning)
        return fit_rcm(_studies_to_data(studies, config.center), eps=config.eps, max_iter=max_iter, inner=config.inner)


def _permuted(pooled: np.ndarray, sizes: list[int], rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(pooled.shape[0])
    bounds = np.cumsum([0] + sizes)
    return [pooled[order[bounds[i] : bounds[i + 1]]] for i in range(len(sizes))]


def permutation_test(
    raw_studies: Sequence[ArrayLike],
    n_permutations: int,
    fit_config: FitConfig | None = None,
    seed: int = 0,
    threads: int = 1,
) -> HomogeneityTest:
    """Permutation test of ``H0: ν = ∞``.

    All rows are pooled (after within-study centring, if ``fit_config.center``)
    and, for each replicate, dealt back into pseudo-studies of the original
    sizes. The model is refitted on each and the p-value counts how many
    null ν̂ fall below the observed one. Replicate ``j`` draws from substream
    ``j`` of ``seed``, so the result does not depend on ``threads``.
    Null ν̂ that saturate at the search cap are kept at the cap value.
    """
    config = fit_config or FitConfig()
    studies = [np.asarray(x, dtype=np.float64) for x in raw_studies]
    if len(studies) < 2:
        raise DomainError("the homogeneity test needs at least two studies")
    if n_permutations < 1:
        raise DomainError("n_permutations must be at least 1")
    p = studies[0].shape[1]
    if any(x.ndim != 2 or x.shape[1] != p for x in studies):
        raise DomainError("all studies must be (n_i, p) matrices with the same p")
    sizes = [x.shape[0] for x in studies]
    observed = _fit_nu(studies, config, config.max_iter)

    rows = [x - x.mean(axis=0) if config.center else x for x in studies]
    pooled = np.vstack(rows)

    def replicate(j: int) -> float:
        perm = _permuted(pooled, sizes, study_rng(seed, j))
        return _fit_nu(perm, config, config.null_max_iter).nu_hat

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            null = list(ex.map(replicate, range(int(n_permutations))))
    else:
        null = [replicate(j) for j in range(int(n_permutations))]
    return HomogeneityTest(
        nu_obs=observed.nu_hat,
        null_nus=null,
        p_value=permutation_p_value(observed.nu_hat, null),
        n_permutations=int(n_permutations),
        seed=int(seed),
        config=asdict(config),
    )
