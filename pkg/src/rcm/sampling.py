"""
Seedable samplers for the random covariance model.

The generative hierarchy is::

    Σ_i       ~ W^{-1}_p(Ψ, ν)
    x | Σ_i   ~ N_p(0, Σ_i)          i = 1, ..., k

All randomness flows through ``numpy.random.Generator`` objects backed by
PCG64. Wishart draws use the Bartlett decomposition with gamma-distributed
chi-square diagonals, so non-integer ν is supported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DomainError
from .matrixcore import SpdMatrix, as_spd, spd_inverse

__all__ = [
    "RcmParams",
    "SyntheticDataset",
    "make_rng",
    "study_rng",
    "compound_symmetry",
    "sample_mvn",
    "sample_wishart",
    "sample_inv_wishart",
    "generate_rcm_dataset",
]


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator from an explicit 64-bit seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def study_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream ``index`` of ``seed`` (a SeedSequence child)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


@dataclass(frozen=True)
class RcmParams:
    """Scale matrix Ψ and degrees of freedom ν of the inverse Wishart layer."""

    psi: SpdMatrix
    nu: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "psi", as_spd(self.psi))
        object.__setattr__(self, "nu", float(self.nu))
        if not self.nu > self.p - 1:
            raise DomainError(f"nu must exceed p - 1 = {self.p - 1}, got {self.nu}")

    @property
    def p(self) -> int:
        return self.psi.dim

    @property
    def sigma(self) -> NDArray[np.float64]:
        """Expected study covariance ``Ψ / (ν - p - 1)``; needs ν > p + 1."""
        if not self.nu > self.p + 1:
            raise DomainError(f"E[Σ] exists only for nu > p + 1 = {self.p + 1}, got {self.nu}")
        return self.psi.entries / (self.nu - self.p - 1)


@dataclass
class SyntheticDataset:
    studies: list[NDArray[np.float64]]
    realized_sigmas: list[SpdMatrix]
    seed: int
    params: RcmParams | None = field(default=None, repr=False)

    @property
    def sizes(self) -> list[int]:
        return [x.shape[0] for x in self.studies]

    @property
    def p(self) -> int:
        return self.studies[0].shape[1]


def compound_symmetry(p: int, var: float = 1.0, cov: float = 0.5) -> SpdMatrix:
    """Matrix with ``var`` on the diagonal and ``cov`` elsewhere.

    Positive definite iff ``var > cov`` (when p >= 2) and ``var + (p-1) cov > 0``.
    """
    if p < 1:
        raise DomainError("p must be positive")
    if p >= 2 and not (var > cov and var + (p - 1) * cov > 0):
        raise DomainError(f"compound symmetry ({var}, {cov}) is not positive definite for p={p}")
    if p == 1 and not var > 0:
        raise DomainError("variance must be positive")
    a = np.full((p, p), float(cov))
    np.fill_diagonal(a, float(var))
    return SpdMatrix(a)


def sample_mvn(rng: np.random.Generator, n: int, sigma: SpdMatrix | ArrayLike) -> NDArray[np.float64]:
    """``n`` i.i.d. rows from N(0, sigma), as ``z @ L.T`` with ``L`` the Cholesky factor."""
    sigma = as_spd(sigma)
    if n < 0:
        raise DomainError("n must be nonnegative")
    z = rng.standard_normal((int(n), sigma.dim))
    return z @ sigma.chol.T


def _bartlett(rng: np.random.Generator, p: int, nu: float, size: int) -> NDArray[np.float64]:
    if not nu > p - 1:
        raise DomainError(f"Wishart needs nu > p - 1 = {p - 1}, got {nu}")
    a = np.zeros((size, p, p))
    diag = np.sqrt(rng.chisquare(nu - np.arange(p), size=(size, p)))
    idx = np.arange(p)
    a[:, idx, idx] = diag
    rows, cols = np.tril_indices(p, -1)
    if rows.size:
        a[:, rows, cols] = rng.standard_normal((size, rows.size))
    return a


def _tril_inverse_batch(b: NDArray[np.float64]) -> NDArray[np.float64]:
    # Forward substitution for a stack of lower-triangular matrices.
    size, p, _ = b.shape
    x = np.zeros_like(b)
    for i in range(p):
        x[:, i, i] = 1.0 / b[:, i, i]
        if i:
            x[:, i, :i] = -np.einsum("sm,smj->sj", b[:, i, :i], x[:, :i, :i]) / b[:, i, i][:, None]
    return x


def _sym_batch(a: NDArray[np.float64]) -> NDArray[np.float64]:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def sample_wishart(
    rng: np.random.Generator,
    theta: SpdMatrix | ArrayLike,
    nu: float,
    size: int | None = None,
):
    """Draw from the Wishart distribution W_p(theta, nu).

    Parameters
    ----------
    rng : numpy.random.Generator
    theta : SpdMatrix or array_like
        (p, p) scale matrix.
    nu : float
        Degrees of freedom, ``nu > p - 1``; need not be an integer.
    size : int, optional
        Number of draws. If omitted a single ``SpdMatrix`` is returned,
        otherwise a ``(size, p, p)`` array.

    Notes
    -----
    With ``theta = L L^T`` the draw is ``L A A^T L^T`` where ``A`` is lower
    triangular, ``A_jj^2 ~ χ²(ν - j + 1)`` and the strictly lower entries are
    standard normal.
    """
    theta = as_spd(theta)
    n = 1 if size is None else int(size)
    a = _bartlett(rng, theta.dim, float(nu), n)
    la = theta.chol @ a
    w = _sym_batch(la @ np.swapaxes(la, -1, -2))
    return SpdMatrix(w[0]) if size is None else w


def sample_inv_wishart(
    rng: np.random.Generator,
    psi: SpdMatrix | ArrayLike,
    nu: float,
    size: int | None = None,
):
    """Draw from the inverse Wishart distribution W^{-1}_p(psi, nu).

    Equivalent to inverting a ``W_p(psi^{-1}, nu)`` draw. The Wishart draw's
    Cholesky factor ``L A`` is already available from the Bartlett
    construction, so the inverse is ``(LA)^{-T} (LA)^{-1}`` without a second
    factorisation. Same ``size`` convention as :func:`sample_wishart`.
    """
    psi = as_spd(psi)
    n = 1 if size is None else int(size)
    theta = spd_inverse(psi)
    a = _bartlett(rng, psi.dim, float(nu), n)
    binv = _tril_inverse_batch(theta.chol @ a)
    s = _sym_batch(np.swapaxes(binv, -1, -2) @ binv)
    return SpdMatrix(s[0]) if size is None else s


def generate_rcm_dataset(seed: int, params: RcmParams, sizes: Sequence[int]) -> SyntheticDataset:
    """Simulate k studies from the random covariance model.

    Study ``i`` draws its covariance and then its observations from
    ``study_rng(seed, i)``, so studies can be generated independently and in
    any order.
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise DomainError("sizes must be nonempty")
    if any(s < 1 for s in sizes):
        raise DomainError(f"every study needs at least one observation, got {sizes}")
    studies, sigmas = [], []
    for i, n in enumerate(sizes):
        rng = study_rng(seed, i)
        sigma_i = sample_inv_wishart(rng, params.psi, params.nu)
        studies.append(sample_mvn(rng, n, sigma_i))
        sigmas.append(sigma_i)
    return SyntheticDataset(studies=studies, realized_sigmas=sigmas, seed=int(seed), params=params)
