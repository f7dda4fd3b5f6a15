"""
Estimators of the common scale matrix Ψ and the homogeneity parameter ν.

Three Ψ-updates are available for fixed ν:

``pooled``
    ``Ψ = (ν - p - 1) Σ S_i / Σ n_i``, the pooled empirical covariance rescaled.
``em``
    Iterates ``Θ <- (1/kν) Σ (n_i + ν)(Θ^{-1} + S_i)^{-1}`` on ``Θ = Ψ^{-1}``.
``approx_mle``
    ``Ψ = Σ (ν + n_i) S_i / n•``, a first-order Neumann truncation of the
    score equation. Only approximate.

:func:`fit_rcm` alternates one of these with a 1-D maximisation over ν
(coordinate ascent) until the log-likelihood stops increasing.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import eigh

from .errors import BracketError, DomainError, NotPositiveDefinite, MaxIterationsExceeded, NuSaturationWarning, SampleSizeWarning
from .likelihood import NU_DELTA, NuProfile, StudyData, _assemble, relative_logdets, stack_studies
from .matrixcore import SpdMatrix, as_spd, chol_inv_logdet, chol_logdet, symmetrize
from .sampling import RcmParams

__all__ = [
    "ESTIMATORS",
    "NU_CAP",
    "FitResult",
    "estimate_pooled",
    "em_step",
    "estimate_em",
    "estimate_approx_mle",
    "maximize_nu",
    "default_init",
    "fit_rcm",
]

Estimator = Literal["pooled", "em", "approx_mle"]
ESTIMATORS: tuple[str, ...] = ("pooled", "em", "approx_mle")
Criterion = Literal["abs", "rel", "param"]

NU_CAP = 1e9
GOLDEN_RTOL = 1e-6
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class FitResult:
    """Outcome of a fit.

    ``loglik_trace[0]`` is the log-likelihood at the starting point; each
    further entry follows one iteration. ``sigma_hat`` is ``None`` unless
    ``nu_hat > p + 1``.
    """

    psi_hat: SpdMatrix
    nu_hat: float
    sigma_hat: SpdMatrix | None
    loglik_trace: list[float]
    iterations: int
    wall_time: float
    converged: bool
    estimator: str
    nu_saturated: bool = False
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def p(self) -> int:
        return self.psi_hat.dim

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


def _sigma_from(psi: NDArray[np.float64], nu: float) -> SpdMatrix | None:
    p = psi.shape[0]
    if not nu > p + 1:
        return None
    return SpdMatrix(psi / (nu - p - 1))


def _pooled_sigma(scatters: NDArray[np.float64], ns: NDArray[np.int64]) -> NDArray[np.float64]:
    return symmetrize(np.sum(scatters, axis=0) / float(np.sum(ns)))


def estimate_pooled(data: Sequence[StudyData], nu: float) -> tuple[SpdMatrix, SpdMatrix]:
    """Pooled moment estimator.

    Returns
    -------
    psi_hat, sigma_hat : SpdMatrix
        ``sigma_hat = Σ S_i / Σ n_i`` and ``psi_hat = (ν - p - 1) sigma_hat``.

    Raises
    ------
    DomainError
        If ``nu <= p + 1`` (the inverse Wishart mean does not exist).
    """
    scatters, ns = stack_studies(data)
    p = scatters.shape[1]
    if not nu > p + 1:
        raise DomainError(f"pooled estimator needs nu > p + 1 = {p + 1}, got {nu}")
    sigma = _pooled_sigma(scatters, ns)
    return SpdMatrix((nu - p - 1) * sigma), SpdMatrix(sigma)


def estimate_approx_mle(data: Sequence[StudyData], nu: float) -> tuple[SpdMatrix, SpdMatrix | None]:
    """Approximate MLE ``Ψ = Σ (ν + n_i) S_i / n•``.

    The estimator comes from keeping only the first term of a Neumann series
    for ``(I + Ψ^{-1} S_i)^{-1}``; the eigenvalue condition under which that
    series converges is not checked. ``sigma_hat`` is ``None`` for ν <= p + 1.
    """
    data = list(data)
    if not data:
        raise DomainError("at least one study is required")
    scatters, ns = stack_studies(data)
    p = scatters.shape[1]
    if not nu > p - 1:
        raise DomainError(f"nu must exceed p - 1 = {p - 1}, got {nu}")
    psi = SpdMatrix(_approx_mle_psi(scatters, ns, float(nu)))
    return psi, _sigma_from(psi.entries, nu)


def _approx_mle_psi(scatters, ns, nu):
    acc = np.zeros(scatters.shape[1:])
    for s, n in zip(scatters, ns):
        acc = acc + (nu + n) * s
    return acc / float(np.sum(ns))


def em_step(theta: SpdMatrix | ArrayLike, data: Sequence[StudyData], nu: float) -> SpdMatrix:
    """One EM update ``Θ <- (1/kν) Σ (n_i + ν)(Θ^{-1} + S_i)^{-1}``."""
    theta = as_spd(theta)
    scatters, ns = stack_studies(data)
    p = scatters.shape[1]
    if not nu > p - 1:
        raise DomainError(f"nu must exceed p - 1 = {p - 1}, got {nu}")
    psi, _ = chol_inv_logdet(theta.entries)
    new, _, _, _ = _em_sweep(psi, scatters, ns, float(nu))
    return SpdMatrix(new)


def _em_sweep(psi, scatters, ns, nu):
    # One pass: Θ update, log|Ψ| and rel_i = log|Ψ+S_i| - log|Ψ| from shared factorisations.
    logdet_psi, rel, invs = relative_logdets(psi, scatters, with_inverse=True)
    acc = np.tensordot(nu + ns, invs, axes=1)
    return symmetrize(acc / (ns.size * nu)), logdet_psi, rel, acc


def _run_em(psi, scatters, ns, nu, eps, max_iter, criterion="abs"):
    """Iterate EM from Ψ; return (Ψ, log|Ψ|, rel, trace, iterations, converged)."""
    p = psi.shape[0]
    theta_next, logdet_psi, logdets, _ = _em_sweep(psi, scatters, ns, nu)
    trace = [_assemble(nu, logdet_psi, logdets, ns, p)]
    for it in range(1, max_iter + 1):
        new_psi, _ = chol_inv_logdet(theta_next)
        next_theta, new_logdet_psi, new_logdets, _ = _em_sweep(new_psi, scatters, ns, nu)
        ll = _assemble(nu, new_logdet_psi, new_logdets, ns, p)
        trace.append(ll)
        if criterion == "param":
            change = np.linalg.norm(new_psi - psi) / np.linalg.norm(psi)
        elif criterion == "rel":
            change = (ll - trace[-2]) / abs(ll) if ll != 0 else ll - trace[-2]
        else:
            change = ll - trace[-2]
        psi, logdet_psi, logdets, theta_next = new_psi, new_logdet_psi, new_logdets, next_theta
        if change < eps:
            return psi, logdet_psi, logdets, trace, it, True
    return psi, logdet_psi, logdets, trace, max_iter, False


def estimate_em(
    data: Sequence[StudyData],
    nu: float,
    theta0: SpdMatrix | ArrayLike | None = None,
    eps: float = 1e-8,
    max_iter: int = 10_000,
    criterion: Criterion = "abs",
) -> FitResult:
    """EM estimate of Ψ for fixed ν.

    Parameters
    ----------
    data : sequence of StudyData
    nu : float
        Degrees of freedom, held fixed.
    theta0 : SpdMatrix, optional
        Starting precision-scale matrix Θ = Ψ^{-1}. Defaults to the inverse of
        the pooled-moment Ψ (or of the approximate MLE when ν <= p + 1).
    eps : float
        Stopping threshold applied to the chosen ``criterion``: the absolute
        log-likelihood increment (``"abs"``), the increment relative to
        ``|ℓ|`` (``"rel"``), or the relative Frobenius change in Ψ (``"param"``).
    max_iter : int
        Iteration cap. Hitting it issues :class:`MaxIterationsExceeded` and
        returns the last iterate with ``converged=False``.
    """
    t0 = time.perf_counter()
    scatters, ns = stack_studies(data)
    p = scatters.shape[1]
    nu = float(nu)
    if not nu > p - 1:
        raise DomainError(f"nu must exceed p - 1 = {p - 1}, got {nu}")
    if eps <= 0:
        raise DomainError("eps must be positive")
    if theta0 is None:
        psi0 = _default_psi(scatters, ns, nu)
    else:
        psi0, _ = chol_inv_logdet(as_spd(theta0).entries)
    psi, _, _, trace, iters, converged = _run_em(psi0, scatters, ns, nu, eps, int(max_iter), criterion)
    if not converged:
        warnings.warn(f"EM stopped after {max_iter} iterations without converging", MaxIterationsExceeded, stacklevel=2)
    return FitResult(
        psi_hat=SpdMatrix(psi),
        nu_hat=nu,
        sigma_hat=_sigma_from(psi, nu),
        loglik_trace=trace,
        iterations=iters,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        estimator="em",
    )


def _golden_max(f: Callable[[float], float], a: float, b: float, tol: float) -> tuple[float, float]:
    """Maximise a unimodal ``f`` on ``[a, b]``; return the best point seen and its value."""
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    best = (c, fc) if fc >= fd else (d, fd)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
            if fc > best[1]:
                best = (c, fc)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
            if fd > best[1]:
                best = (d, fd)
    return best


def _argmax_nu(profile: Callable[[float], float], lo: float, hi: float, cap: float = NU_CAP, rtol: float = GOLDEN_RTOL) -> tuple[float, float, bool]:
    """Golden-section search over log ν with upward bracket doubling.

    Returns ``(nu, value, saturated)`` where ``saturated`` means the profile
    was still increasing at ``cap``.
    """
    hi = min(hi, cap)
    g = lambda x: profile(math.exp(x))  # noqa: E731
    a, b = math.log(lo), math.log(hi)
    while b < math.log(cap):
        inner = max(b - math.log(2.0), a)
        if g(b) > g(inner):
            a, b = inner, min(b + math.log(2.0), math.log(cap))
        else:
            break
    x, fx = _golden_max(g, a, b, rtol)
    saturated = b >= math.log(cap) and x >= b - 10 * rtol
    if saturated:
        x, fx = b, g(b)
    return math.exp(x), fx, saturated


def _nu_lower(p: int) -> float:
    return p - 1 + 2 * NU_DELTA


def maximize_nu(
    psi: SpdMatrix | ArrayLike,
    data: Sequence[StudyData],
    bracket: tuple[float, float] | None = None,
    *,
    cap: float = NU_CAP,
    strict: bool = False,
) -> float:
    """Maximise the ν-profile of the log-likelihood for fixed Ψ.

    The profile is concave in ν, so a golden-section search (run on log ν)
    finds the global maximum in the bracket. If the maximum sits at the upper
    edge the bracket is doubled up to ``cap``.

    Parameters
    ----------
    bracket : (lo, hi), optional
        Defaults to ``(p - 1 + 2e-6, 10 p + 10)``. ``lo`` must exceed
        ``p - 1 + 1e-6``.
    strict : bool
        Raise :class:`BracketError` instead of returning ``cap`` with a
        :class:`NuSaturationWarning` when the profile is still increasing at
        the cap (no detectable heterogeneity).
    """
    profile = NuProfile(psi, data)
    p = profile.p
    lo, hi = bracket if bracket is not None else (_nu_lower(p), 10.0 * p + 10.0)
    if not lo > p - 1 + NU_DELTA:
        raise DomainError(f"bracket lower end must exceed p - 1 + {NU_DELTA:g} = {p - 1 + NU_DELTA}, got {lo}")
    if not hi > lo:
        raise DomainError(f"bracket ({lo}, {hi}) is empty")
    nu, _, saturated = _argmax_nu(profile, lo, hi, cap)
    if saturated:
        if strict:
            raise BracketError(f"log-likelihood still increasing in nu at cap {cap:g}")
        warnings.warn(f"nu estimate saturated at cap {cap:g}", NuSaturationWarning, stacklevel=2)
    return nu


def _default_psi(scatters, ns, nu):
    p = scatters.shape[1]
    if nu > p + 1:
        base = (nu - p - 1) * _pooled_sigma(scatters, ns)
    else:
        base = _approx_mle_psi(scatters, ns, nu)
    return _jitter_if_needed(base)


def _jitter_if_needed(psi):
    try:
        chol_logdet(psi)
        return psi
    except NotPositiveDefinite:
        jitter = 1e-8 * max(float(np.mean(np.diag(psi))), 1e-300)
        warnings.warn("initial Ψ is singular; adding diagonal jitter", RuntimeWarning, stacklevel=3)
        return psi + jitter * np.eye(psi.shape[0])


def _ridge_step(psi, logdet_psi, logdets, scatters, ns, nu, cap):
    """Maximise ℓ(cΨ, ν) over ν with ``c = (ν-p-1)/(ν0-p-1)``, i.e. Σ fixed.

    With ``λ_ij`` the eigenvalues of ``Ψ^{-1} S_i``,
    ``log|cΨ + S_i| = log|Ψ| + Σ_j log(c + λ_ij)``, so each trial ν is O(kp).
    """
    p = psi.shape[0]
    c0 = nu - p - 1
    lam = np.stack([eigh(s, psi, eigvals_only=True) for s in scatters])
    lam = np.maximum(lam, 0.0)

    def along(v: float) -> float:
        c = (v - p - 1) / c0
        return _assemble(v, logdet_psi + p * math.log(c), np.sum(np.log1p(lam / c), axis=1), ns, p)

    current = _assemble(nu, logdet_psi, logdets, ns, p)
    new_nu, value, _ = _argmax_nu(along, p + 1 + 2 * NU_DELTA, max(10.0 * p + 10.0, 2.0 * nu), cap)
    if not value > current:
        return psi, logdet_psi, logdets, nu
    c = (new_nu - p - 1) / c0
    return c * psi, logdet_psi + p * math.log(c), np.sum(np.log1p(lam / c), axis=1), new_nu


def default_init(data: Sequence[StudyData], method: str = "pooled") -> RcmParams:
    """Starting point ``ν0 = 2p + 2`` and ``Ψ0`` from the pooled moment (or approx MLE) at ν0."""
    scatters, ns = stack_studies(data)
    p = scatters.shape[1]
    nu0 = 2.0 * p + 2.0
    if method == "pooled":
        psi0 = (nu0 - p - 1) * _pooled_sigma(scatters, ns)
    elif method == "approx_mle":
        psi0 = _approx_mle_psi(scatters, ns, nu0)
    else:
        raise DomainError(f"unknown init method {method!r}")
    return RcmParams(SpdMatrix(_jitter_if_needed(psi0)), nu0)


def fit_rcm(
    data: Sequence[StudyData],
    init: RcmParams | str | None = None,
    eps: float = 1e-6,
    max_iter: int = 1000,
    inner: Estimator = "em",
    *,
    criterion: Criterion = "abs",
    inner_eps: float = 1e-8,
    inner_max_iter: int = 10_000,
    em_mode: Literal["converge", "step"] = "converge",
    nu_cap: float = NU_CAP,
    ridge_step: bool = True,
) -> FitResult:
    """Maximum likelihood fit of (Ψ, ν).

    With ``inner="em"`` this is coordinate ascent: each outer iteration runs
    EM for Ψ at the current ν, then maximises the log-likelihood over ν with
    Ψ fixed. Iteration stops when the log-likelihood increment drops below
    ``eps`` (or per ``criterion``: ``"rel"`` relative increment, ``"param"``
    relative change in Ψ and ν).

    The closed-form updates are not ascent steps, and alternating them with
    the ν search does not settle (pooled drives ν to p + 1, the approximate
    MLE lets ν drift upward). For ``inner="pooled"`` or ``"approx_mle"`` the
    closed form instead defines a curve ``ν -> Ψ̂(ν)`` and ν̂ maximises
    ``ℓ(Ψ̂(ν), ν)`` along it by golden-section search; ``eps``,
    ``max_iter`` and the EM-specific options are then unused.

    Parameters
    ----------
    init : RcmParams or {"pooled", "approx_mle"}, optional
        Starting parameters. A string picks :func:`default_init`'s method;
        ``"approx_mle"`` warm-starts from the approximate MLE. When omitted,
        EM starts from whichever of :func:`default_init` and the pooled
        profile fit has the higher log-likelihood. EM slows to a crawl once
        ν̂ is large (its rate is about ``ν/(n+ν)``), and this start keeps a
        stalled run from ending below the pooled fit.
    inner : {"em", "pooled", "approx_mle"}
        The Ψ-update.
    inner_eps, inner_max_iter : float, int
        EM tolerance and cap within each outer iteration.
    em_mode : {"converge", "step"}
        Run EM to ``inner_eps`` per outer iteration, or apply a single step.
    nu_cap : float
        Upper limit of the ν search. Reaching it sets ``nu_saturated``.
    ridge_step : bool
        EM only. Before the Ψ-fixed ν search, also search ν with ``Σ = Ψ/(ν-p-1)``
        held fixed (Ψ rescaled along). Ψ and ν are strongly coupled along
        that direction, and without this step the alternation creeps along
        the ridge for thousands of iterations. Both steps are ascent steps;
        ``False`` gives plain alternation.
    """
    t0 = time.perf_counter()
    data = list(data)
    scatters, ns = stack_studies(data)
    p = scatters.shape[1]
    if inner not in ESTIMATORS:
        raise DomainError(f"unknown inner estimator {inner!r}; choose from {ESTIMATORS}")
    if int(np.sum(ns)) < p:
        warnings.warn(
            f"total sample size {int(np.sum(ns))} is below p = {p}; the maximum in Ψ need not be unique",
            SampleSizeWarning,
            stacklevel=2,
        )
    auto_start = init is None
    if init is None or isinstance(init, str):
        init = default_init(data, init or "pooled")
    if inner != "em":
        return _fit_along_curve(scatters, ns, inner, init, nu_cap, t0)
    if auto_start:
        init = _better_start(scatters, ns, init, nu_cap)
    psi = np.array(init.psi.entries)
    nu = float(init.nu)
    nu_lo = _nu_lower(p)

    l_prev = _assemble(nu, *relative_logdets(psi, scatters), ns, p)
    trace = [l_prev]
    converged = False
    saturated = False
    inner_iters = []
    it = 0
    breakdown = None
    for it in range(1, int(max_iter) + 1):
        old_psi, old_nu, old_saturated = psi, nu, saturated
        try:
            psi, logdet_psi, logdets, _, n_inner, _ = _run_em(
                psi, scatters, ns, nu, inner_eps, 1 if em_mode == "step" else int(inner_max_iter)
            )
            inner_iters.append(n_inner)
            if ridge_step and nu > p + 1 + 2 * NU_DELTA:
                psi, logdet_psi, logdets, nu = _ridge_step(psi, logdet_psi, logdets, scatters, ns, nu, nu_cap)
            profile = NuProfile.from_logdets(p, ns, logdet_psi, logdets)
            new_nu, l_new, saturated = _argmax_nu(profile, nu_lo, max(10.0 * p + 10.0, 2.0 * nu), nu_cap)
            # Keep the previous ν if the search's best point is (numerically) no better.
            if nu > nu_lo:
                l_old_nu = profile(nu)
                if l_old_nu >= l_new:
                    new_nu, l_new = nu, l_old_nu
                    saturated = saturated and nu >= nu_cap
        except NotPositiveDefinite as exc:
            # Typically n• < p: ℓ is unbounded as Ψ degenerates outside the data span.
            psi, nu, saturated, breakdown = old_psi, old_nu, old_saturated, exc
            it -= 1
            break
        nu = new_nu
        trace.append(l_new)
        if criterion == "param":
            change = max(np.linalg.norm(psi - old_psi) / np.linalg.norm(old_psi), abs(nu - old_nu) / old_nu)
        elif criterion == "rel":
            change = (l_new - l_prev) / abs(l_new) if l_new != 0 else l_new - l_prev
        else:
            change = l_new - l_prev
        l_prev = l_new
        if change < eps:
            converged = True
            break
    if breakdown is not None:
        warnings.warn(f"Ψ became numerically singular ({breakdown}); returning the last iterate", MaxIterationsExceeded, stacklevel=2)
    elif not converged:
        warnings.warn(f"coordinate ascent stopped after {max_iter} iterations without converging", MaxIterationsExceeded, stacklevel=2)
    if saturated:
        warnings.warn(f"nu estimate saturated at cap {nu_cap:g}", NuSaturationWarning, stacklevel=2)
    return FitResult(
        psi_hat=SpdMatrix(psi),
        nu_hat=nu,
        sigma_hat=_sigma_from(psi, nu),
        loglik_trace=trace,
        iterations=it,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        estimator=inner,
        nu_saturated=bool(saturated),
        extra={"inner_iterations": inner_iters},
    )


def _fit_along_curve(scatters, ns, inner, init, cap, t0) -> FitResult:
    """Profile fit for a closed-form Ψ̂(ν): maximise ℓ(Ψ̂(ν), ν) over ν."""
    p = scatters.shape[1]
    if inner == "pooled":
        # Ψ̂(ν) = (ν-p-1) Σ̄; with λ_ij the eigenvalues of Σ̄^{-1} S_i,
        # log|cΣ̄ + S_i| = log|Σ̄| + Σ_j log(c + λ_ij), so each trial ν is O(kp).
        sigma = _pooled_sigma(scatters, ns)
        logdet_sigma = chol_logdet(sigma)
        lam = np.maximum(np.stack([eigh(s, sigma, eigvals_only=True) for s in scatters]), 0.0)
        lo = p + 1 + 2 * NU_DELTA

        def curve(v: float) -> np.ndarray:
            return (v - p - 1) * sigma

        def along(v: float) -> float:
            c = v - p - 1
            return _assemble(v, logdet_sigma + p * math.log(c), np.sum(np.log1p(lam / c), axis=1), ns, p)

    else:
        lo = _nu_lower(p)

        def curve(v: float) -> np.ndarray:
            return _approx_mle_psi(scatters, ns, v)

        def along(v: float) -> float:
            psi = curve(v)
            try:
                return _assemble(v, *relative_logdets(psi, scatters), ns, p)
            except NotPositiveDefinite:
                return -math.inf

    start = max(float(init.nu), lo * (1 + 1e-3))
    trace = [along(start)]
    nu, value, saturated = _argmax_nu(along, lo, max(10.0 * p + 10.0, 2.0 * start), cap)
    if not math.isfinite(value):
        raise NotPositiveDefinite(f"the {inner} estimate is singular for every nu; need more observations")
    trace.append(value)
    if saturated:
        warnings.warn(f"nu estimate saturated at cap {cap:g}", NuSaturationWarning, stacklevel=3)
    psi = curve(nu)
    return FitResult(
        psi_hat=SpdMatrix(psi),
        nu_hat=nu,
        sigma_hat=_sigma_from(psi, nu),
        loglik_trace=trace,
        iterations=1,
        wall_time=time.perf_counter() - t0,
        converged=True,
        estimator=inner,
        nu_saturated=bool(saturated),
    )


def _better_start(scatters, ns, init: RcmParams, cap: float) -> RcmParams:
    p = scatters.shape[1]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NuSaturationWarning)
            alt = _fit_along_curve(scatters, ns, "pooled", init, cap, time.perf_counter())
    except (NotPositiveDefinite, DomainError):
        return init
    base = _assemble(init.nu, *relative_logdets(init.psi.entries, scatters), ns, p)
    return RcmParams(alt.psi_hat, alt.nu_hat) if alt.loglik > base else init
