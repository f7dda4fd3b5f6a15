"""
Symmetric positive-definite matrix primitives.

Every determinant and inverse in the package goes through a Cholesky
factorisation (LAPACK ``potrf``/``potri``). A matrix is accepted as positive
definite only if every pivot exceeds ``PIVOT_RTOL`` times its largest
diagonal entry.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import lapack
from scipy.special import gammaln

from .errors import DomainError, NotPositiveDefinite

__all__ = [
    "PIVOT_RTOL",
    "SpdMatrix",
    "as_spd",
    "symmetrize",
    "cholesky",
    "log_det",
    "spd_inverse",
    "log_multigamma",
]

PIVOT_RTOL = 1e-12

_LOG_PI = math.log(math.pi)


def symmetrize(a: ArrayLike) -> NDArray[np.float64]:
    """Return ``(a + a.T) / 2`` as a fresh float64 array."""
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (a + a.T)


def _check_square(a: NDArray[np.float64]) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise DomainError(f"expected a non-empty square matrix, got shape {a.shape}")


def _chol_lower(a: NDArray[np.float64]) -> NDArray[np.float64]:
    # a is assumed symmetric; only its lower triangle is read.
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    dmax = float(np.max(np.diag(a)))
    if dmax <= 0.0:
        raise NotPositiveDefinite("matrix has no positive diagonal entry")
    c, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        raise NotPositiveDefinite(f"Cholesky failed at pivot {info}")
    piv = np.diag(c) ** 2
    if np.any(piv <= PIVOT_RTOL * dmax):
        j = int(np.argmin(piv))
        raise NotPositiveDefinite(f"pivot {j + 1} is {piv[j]:.3g}, below {PIVOT_RTOL:g} x max diagonal")
    return c


def _inv_from_chol(c: NDArray[np.float64]) -> NDArray[np.float64]:
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:  # pragma: no cover - potrf already succeeded
        raise NotPositiveDefinite(f"potri failed with info={info}")
    lower = np.tril(inv)
    return lower + np.tril(inv, -1).T


def _logdet_from_chol(c: NDArray[np.float64]) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def chol_inv_logdet(a: NDArray[np.float64]) -> tuple[NDArray[np.float64], float]:
    """Inverse and log-determinant of a symmetric array in one factorisation.

    Array-level workhorse for the estimators' inner loops; no wrapping.
    """
    c = _chol_lower(a)
    return _inv_from_chol(c), _logdet_from_chol(c)


def chol_logdet(a: NDArray[np.float64]) -> float:
    return _logdet_from_chol(_chol_lower(a))


class SpdMatrix:
    """An immutable symmetric positive-definite matrix with its Cholesky factor.

    The input is symmetrised on construction and factorised immediately, so
    an ``SpdMatrix`` that exists is known to be positive definite.

    Parameters
    ----------
    entries : array_like
        (p, p) matrix. Asymmetry is removed by averaging with the transpose.
    """

    __slots__ = ("_entries", "_chol")

    def __init__(self, entries: ArrayLike) -> None:
        a = np.array(entries, dtype=np.float64, copy=True)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        _check_square(a)
        a = symmetrize(a)
        c = _chol_lower(a)
        a.setflags(write=False)
        c.setflags(write=False)
        self._entries = a
        self._chol = c

    @property
    def entries(self) -> NDArray[np.float64]:
        return self._entries

    @property
    def chol(self) -> NDArray[np.float64]:
        """Lower-triangular ``L`` with ``L @ L.T == entries``."""
        return self._chol

    @property
    def dim(self) -> int:
        return self._entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self._entries, dtype=dtype)

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpdMatrix):
            return NotImplemented
        return np.array_equal(self._entries, other._entries)

    __hash__ = None  # type: ignore[assignment]


def as_spd(m: SpdMatrix | ArrayLike) -> SpdMatrix:
    """Pass an ``SpdMatrix`` through, wrap anything else."""
    return m if isinstance(m, SpdMatrix) else SpdMatrix(m)


def cholesky(m: SpdMatrix | ArrayLike) -> NDArray[np.float64]:
    """Lower-triangular Cholesky factor of ``m``.

    Raises
    ------
    NotPositiveDefinite
        If any pivot is not positive (relative to the largest diagonal entry).
    """
    return np.array(as_spd(m).chol)


def log_det(m: SpdMatrix | ArrayLike) -> float:
    """``log|m|`` as twice the summed log of the Cholesky diagonal."""
    return _logdet_from_chol(as_spd(m).chol)


def spd_inverse(m: SpdMatrix | ArrayLike) -> SpdMatrix:
    """Inverse of an SPD matrix via its Cholesky factor."""
    return SpdMatrix(_inv_from_chol(np.array(as_spd(m).chol)))


def log_multigamma(p: int, t: float) -> float:
    """Log of the multivariate gamma function,

    ``log Γ_p(t) = p(p-1)/4 · log π + Σ_{j=1..p} log Γ(t + (1-j)/2)``.

    Raises
    ------
    DomainError
        If ``t <= (p - 1) / 2``, where a gamma argument becomes nonpositive.
    """
    if int(p) != p or p < 1:
        raise DomainError(f"p must be a positive integer, got {p!r}")
    p = int(p)
    if not t > 0.5 * (p - 1):
        raise DomainError(f"log_multigamma requires t > (p-1)/2 = {0.5 * (p - 1)}, got t={t}")
    args = t + 0.5 * (1 - np.arange(1, p + 1))
    if p == 1:
        return float(gammaln(t))
    return 0.25 * p * (p - 1) * _LOG_PI + float(np.sum(gammaln(args)))
