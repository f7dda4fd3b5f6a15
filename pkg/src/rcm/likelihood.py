"""
Marginal log-likelihood of the random covariance model.

Integrating Σ_i out of the Gaussian / inverse-Wishart hierarchy gives, per study,

    log f(X_i | Ψ, ν) = (ν/2) log|Ψ| - ((ν+n_i)/2) log|Ψ + S_i|
                        + log Γ_p((ν+n_i)/2) - log Γ_p(ν/2) - (n_i p / 2) log π

with ``S_i = X_i^T X_i``. The ``log π`` constant is kept so the value is the
exact log density and can be checked against numerical integration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .errors import DimensionMismatch, DomainError
from .matrixcore import SpdMatrix, _chol_lower, _logdet_from_chol, as_spd, chol_inv_logdet, chol_logdet, symmetrize
from .sampling import RcmParams

__all__ = [
    "NU_DELTA",
    "StudyData",
    "stack_studies",
    "log_likelihood",
    "log_likelihood_fast",
    "grad_psi",
    "profile_nu",
    "NuProfile",
    "relative_logdets",
]

NU_DELTA = 1e-6

_LOG_PI = math.log(math.pi)


@dataclass(frozen=True)
class StudyData:
    """Sufficient statistics of one study: scatter ``S = X^T X`` and sample count ``n``."""

    scatter: NDArray[np.float64]
    n: int

    def __post_init__(self) -> None:
        s = np.array(self.scatter, dtype=np.float64)
        if s.ndim == 0:
            s = s.reshape(1, 1)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise DomainError(f"scatter must be square, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise DomainError("scatter has non-finite entries")
        s = symmetrize(s)
        scale = max(float(np.max(np.abs(np.diag(s)))), 1.0)
        if np.linalg.eigvalsh(s)[0] < -1e-10 * scale:
            raise DomainError("scatter matrix is not positive semidefinite")
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n!r}")
        s.setflags(write=False)
        object.__setattr__(self, "scatter", s)
        object.__setattr__(self, "n", int(self.n))

    @property
    def p(self) -> int:
        return self.scatter.shape[0]

    @classmethod
    def from_observations(cls, x: ArrayLike, center: bool = False) -> "StudyData":
        """Build from an ``(n, p)`` observation matrix, optionally column-centred first.

        ``n`` stays the row count even when centring.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise DomainError("observations must be a 2-d array")
        if center:
            x = x - x.mean(axis=0)
        return cls(x.T @ x, x.shape[0])


def stack_studies(data: Sequence[StudyData]) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    """Stack scatters into ``(k, p, p)`` and counts into ``(k,)``, checking dimensions."""
    data = list(data)
    if not data:
        raise DomainError("at least one study is required")
    p = data[0].p
    for d in data:
        if d.p != p:
            raise DimensionMismatch(f"studies have mixed dimensions {p} and {d.p}")
    return np.stack([d.scatter for d in data]), np.array([d.n for d in data], dtype=np.int64)


def _check_nu(nu: float, p: int, delta: float = 0.0) -> float:
    nu = float(nu)
    if not nu > p - 1 + delta:
        raise DomainError(f"nu must exceed p - 1 = {p - 1} (+{delta:g}), got {nu}")
    return nu


_STIRLING_MIN = 1e4


def _lgamma_diff(a: NDArray[np.float64], m: NDArray[np.float64]) -> NDArray[np.float64]:
    """``log Γ(a + m) - log Γ(a)`` without the cancellation of two huge log-gammas.

    For ``a >= 1e4`` the Stirling series is differenced term by term.
    """
    a, m = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(m, dtype=float))
    out = np.empty(a.shape)
    small = a < _STIRLING_MIN
    out[small] = gammaln(a[small] + m[small]) - gammaln(a[small])
    big = ~small
    if np.any(big):
        x, d = a[big], m[big]
        z = x + d

        def series(t):
            t2 = t * t
            return (1.0 / 12.0 - (1.0 / 360.0 - 1.0 / (1260.0 * t2)) / t2) / t

        out[big] = (x - 0.5) * np.log1p(d / x) + d * np.log(z) - d + (series(z) - series(x))
    return out


def gamma_ratio(nu: float, ns: NDArray[np.int64], p: int) -> float:
    """``Σ_i [log Γ_p((ν+n_i)/2) - log Γ_p(ν/2)]`` as differences of scalar log-gammas."""
    half = 0.5 * (nu + 1.0 - np.arange(1, p + 1))  # (ν + 1 - j)/2, j = 1..p
    return float(np.sum(_lgamma_diff(half[None, :], 0.5 * np.asarray(ns, dtype=float)[:, None])))


def _assemble(nu: float, logdet_psi: float, rel: NDArray[np.float64], ns: NDArray[np.int64], p: int) -> float:
    # rel_i = log|Ψ + S_i| - log|Ψ|. Writing the determinant part through rel
    # avoids cancelling two O(ν) terms when ν is large.
    det_part = -0.5 * float(np.sum(ns)) * logdet_psi - 0.5 * float(np.sum((nu + ns) * rel))
    return det_part + gamma_ratio(nu, ns, p) - 0.5 * p * float(np.sum(ns)) * _LOG_PI


def relative_logdets(psi: NDArray[np.float64], scatters: NDArray[np.float64], with_inverse: bool = False):
    """``log|Ψ|`` and ``log|Ψ + S_i| - log|Ψ|`` for a stack of scatters.

    With ``Ψ = L L^T`` the difference is ``Σ_j log1p(λ_j)`` over the
    eigenvalues of ``L^{-1} S_i L^{-T}``, which stays accurate when it is
    tiny. With ``with_inverse`` also returns the ``(Ψ + S_i)^{-1}`` stack.
    """
    chol = _chol_lower(psi)
    logdet_psi = _logdet_from_chol(chol)
    linv = solve_triangular(chol, np.eye(chol.shape[0]), lower=True)
    w = linv @ scatters @ linv.T
    w = 0.5 * (w + np.swapaxes(w, -1, -2))
    if with_inverse:
        lam, vec = np.linalg.eigh(w)
    else:
        lam, vec = np.linalg.eigvalsh(w), None
    lam = np.maximum(lam, 0.0)
    rel = np.sum(np.log1p(lam), axis=-1)
    if not with_inverse:
        return logdet_psi, rel
    vl = np.swapaxes(vec, -1, -2) @ linv
    inv = np.swapaxes(vl, -1, -2) @ (vl / (1.0 + lam)[..., None])
    return logdet_psi, rel, 0.5 * (inv + np.swapaxes(inv, -1, -2))


def _coerce_params(params: RcmParams | tuple) -> RcmParams:
    if isinstance(params, RcmParams):
        return params
    psi, nu = params
    return RcmParams(as_spd(psi), nu)


def log_likelihood(params: RcmParams | tuple, data: Sequence[StudyData]) -> float:
    """Exact marginal log-likelihood of ``(Ψ, ν)`` given per-study sufficient statistics.

    Raises
    ------
    NotPositiveDefinite
        If Ψ or some ``Ψ + S_i`` fails its Cholesky factorisation.
    DomainError
        If ν <= p - 1.
    """
    params = _coerce_params(params)
    scatters, ns = stack_studies(data)
    p = params.p
    if scatters.shape[1] != p:
        raise DimensionMismatch(f"Ψ is {p}x{p} but studies are {scatters.shape[1]}-dimensional")
    nu = _check_nu(params.nu, p)
    logdet_psi, rel = relative_logdets(params.psi.entries, scatters)
    return _assemble(nu, logdet_psi, rel, ns, p)


def log_likelihood_fast(params: RcmParams | tuple, raw: Sequence[ArrayLike]) -> float:
    """Log-likelihood from raw ``(n_i, p)`` observation matrices via the determinant lemma.

    Uses ``|Ψ + X^T X| = |Ψ| |I_n + X Ψ^{-1} X^T|``, so each study costs an
    ``n_i x n_i`` factorisation instead of ``p x p``.
    """
    params = _coerce_params(params)
    p = params.p
    nu = _check_nu(params.nu, p)
    lpsi = params.psi.chol
    logdet_psi = 2.0 * float(np.sum(np.log(np.diag(lpsi))))
    xs = [np.asarray(x, dtype=np.float64) for x in raw]
    if not xs:
        raise DomainError("at least one study is required")
    total = 0.0
    for x in xs:
        if x.ndim != 2 or x.shape[1] != p:
            raise DimensionMismatch(f"expected (n, {p}) observations, got shape {x.shape}")
        n = x.shape[0]
        if n < 1:
            raise DomainError("every study needs at least one observation")
        z = solve_triangular(lpsi, x.T, lower=True)
        m = np.eye(n) + z.T @ z
        ld = chol_logdet(symmetrize(m))
        total += (
            gamma_ratio(nu, np.array([n]), p)
            - 0.5 * n * p * _LOG_PI
            - 0.5 * (nu + n) * ld
            - 0.5 * n * logdet_psi
        )
    return total


def _sym_grad(m: NDArray[np.float64]) -> NDArray[np.float64]:
    # d log|A| / dA in the symmetric parameterisation: 2M - M∘I.
    return 2.0 * m - np.diag(np.diag(m))


def grad_psi(params: RcmParams | tuple, data: Sequence[StudyData]) -> NDArray[np.float64]:
    """Gradient of ``2ℓ`` with respect to the free entries ``Ψ_ij`` (i <= j).

    Entry ``(i, j)`` is the derivative along ``E^{ij}``, the symmetric
    matrix with ones at ``(i, j)`` and ``(j, i)``::

        G = kν (2Ψ^{-1} - Ψ^{-1}∘I) - Σ_i (ν + n_i) (2(Ψ+S_i)^{-1} - (Ψ+S_i)^{-1}∘I)
    """
    params = _coerce_params(params)
    scatters, ns = stack_studies(data)
    p = params.p
    if scatters.shape[1] != p:
        raise DimensionMismatch(f"Ψ is {p}x{p} but studies are {scatters.shape[1]}-dimensional")
    nu = _check_nu(params.nu, p)
    psi = params.psi.entries
    psi_inv, _ = chol_inv_logdet(psi)
    acc = ns.size * nu * psi_inv
    for s, n in zip(scatters, ns):
        inv, _ = chol_inv_logdet(psi + s)
        acc = acc - (nu + n) * inv
    return _sym_grad(symmetrize(acc))


class NuProfile:
    """ℓ(Ψ, ν) as a function of ν alone, for a fixed Ψ.

    The determinants do not depend on ν, so they are computed once and each
    evaluation costs only ``k p`` log-gamma calls.
    """

    def __init__(self, psi: SpdMatrix | ArrayLike, data: Sequence[StudyData]) -> None:
        psi = as_spd(psi)
        scatters, ns = stack_studies(data)
        if scatters.shape[1] != psi.dim:
            raise DimensionMismatch(f"Ψ is {psi.dim}x{psi.dim} but studies are {scatters.shape[1]}-dimensional")
        self.p = psi.dim
        self.ns = ns
        self.logdet_psi, self.rel = relative_logdets(psi.entries, scatters)

    @classmethod
    def from_logdets(cls, p: int, ns: NDArray[np.int64], logdet_psi: float, rel: NDArray[np.float64]) -> "NuProfile":
        """Build from ``log|Ψ|`` and ``rel_i = log|Ψ + S_i| - log|Ψ|``."""
        obj = cls.__new__(cls)
        obj.p, obj.ns = p, ns
        obj.logdet_psi, obj.rel = logdet_psi, rel
        return obj

    def __call__(self, nu: float) -> float:
        nu = _check_nu(nu, self.p, NU_DELTA)
        return _assemble(nu, self.logdet_psi, self.rel, self.ns, self.p)


def profile_nu(psi: SpdMatrix | ArrayLike, data: Sequence[StudyData], nu: float) -> float:
    """Log-likelihood at ``(psi, nu)``, viewed as a function of ν (concave for fixed Ψ).

    Raises
    ------
    DomainError
        If ``nu <= p - 1 + NU_DELTA``.
    """
    return NuProfile(psi, data)(nu)
