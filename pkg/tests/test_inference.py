import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rcm.errors import DomainError
from rcm.inference import (
    FitConfig,
    HomogeneityTest,
    icc,
    icc_montecarlo,
    invwishart_cov,
    permutation_p_value,
    permutation_test,
)
from rcm.sampling import RcmParams, compound_symmetry, generate_rcm_dataset, make_rng, sample_inv_wishart

from conftest import random_spd


# --------------------------------------------------------------------- icc


def test_icc_examples():
    assert icc(773.16, 300) == pytest.approx(0.002113, abs=1e-6)
    assert icc(182.4, 50) == pytest.approx(0.00755, abs=1e-5)
    assert icc(7.0, 5) == 0.5


@given(st.integers(1, 50), st.floats(1e-3, 1e6), st.floats(1e-3, 1e3))
def test_icc_decreasing(p, a, b):
    assert icc(p + a + b, p) < icc(p + a, p)


def test_icc_domain():
    with pytest.raises(DomainError):
        icc(5.0, 5)
    with pytest.raises(DomainError):
        icc(2.0, 5)


# ---------------------------------------------------------- invwishart_cov


def test_invwishart_cov_scalar_matches_inverse_gamma():
    # p = 1: W^{-1}(ψ, ν) is inverse gamma (ν/2, ψ/2).
    v = invwishart_cov([[2.0]], 8.0, (0, 0, 0, 0))
    assert v == pytest.approx(56.0 / 1008.0, rel=1e-14)
    assert v == pytest.approx(stats.invgamma(4.0, scale=1.0).var(), rel=1e-12)


def test_invwishart_cov_diagonal_collapse(rng):
    p, nu = 4, 12.0
    d = np.diag(rng.uniform(0.5, 2.0, p))
    den = (nu - p) * (nu - p - 1) ** 2 * (nu - p - 3)
    assert invwishart_cov(d, nu, (0, 2, 0, 2)) == pytest.approx((nu - p - 1) * d[0, 0] * d[2, 2] / den, rel=1e-14)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(0.5, 40.0))
def test_invwishart_var_identity(seed, p, extra):
    # (i, j, i, j) reproduces Var(Σ_ij) = [(ν-p+1)Ψ_ij² + (ν-p-1)Ψ_iiΨ_jj] / [(ν-p)(ν-p-1)²(ν-p-3)].
    rng = np.random.default_rng(seed)
    psi = random_spd(rng, p)
    nu = p + 3 + extra
    den = (nu - p) * (nu - p - 1) ** 2 * (nu - p - 3)
    for i in range(p):
        for j in range(p):
            var = ((nu - p + 1) * psi[i, j] ** 2 + (nu - p - 1) * psi[i, i] * psi[j, j]) / den
            assert invwishart_cov(psi, nu, (i, j, i, j)) == pytest.approx(var, rel=1e-12)


def test_invwishart_cov_montecarlo():
    # ν well above p + 7 so the sample covariances have finite variance.
    psi, nu = np.array([[1.0, 0.3], [0.3, 2.0]]), 20.0
    draws = sample_inv_wishart(make_rng(7), psi, nu, size=100_000)
    emp = np.cov(draws[:, 0, 1], draws[:, 1, 1])
    assert emp[0, 0] == pytest.approx(invwishart_cov(psi, nu, (0, 1, 0, 1)), rel=0.1)
    assert emp[0, 1] == pytest.approx(invwishart_cov(psi, nu, (0, 1, 1, 1)), rel=0.1)


def test_invwishart_cov_domain():
    with pytest.raises(DomainError):
        invwishart_cov(np.eye(2), 5.0, (0, 0, 0, 0))


# ------------------------------------------------------------ icc_montecarlo


def test_icc_montecarlo_limits():
    assert icc_montecarlo(np.eye(2), 1e4, 20_000, make_rng(3)) < 1e-3
    a = icc_montecarlo(np.eye(2), 10.0, 5_000, make_rng(11))
    b = icc_montecarlo(np.eye(2), 10.0, 5_000, make_rng(11))
    assert a == b
    with pytest.raises(DomainError):
        icc_montecarlo(np.eye(2), 5.0, 100, make_rng(0))


# ------------------------------------------------------------ permutation


def test_p_value_examples():
    assert permutation_p_value(10.0, [20.0] * 500) == pytest.approx(1.0 / 501.0)
    assert permutation_p_value(30.0, [20.0] * 500) == 1.0
    assert permutation_p_value(5.0, [5.0]) == 0.5
    assert permutation_p_value(6.0, [5.0]) == 1.0
    assert permutation_p_value(4.0, [5.0]) == 0.5


@given(st.floats(1.0, 1e6), st.lists(st.floats(1.0, 1e6), min_size=1, max_size=50))
def test_p_value_formula(nu_obs, null):
    p = permutation_p_value(nu_obs, null)
    assert p == (1 + sum(v < nu_obs for v in null)) / (len(null) + 1)
    assert 1.0 / (len(null) + 1) <= p <= 1.0


def _studies(seed, nu, p=3, sizes=(15, 15, 15)):
    return generate_rcm_dataset(seed, RcmParams(compound_symmetry(p, 1.0, 0.5), nu), list(sizes)).studies


def test_permutation_test_reproducible_and_thread_independent():
    studies = _studies(1, 8.0)
    a = permutation_test(studies, 8, seed=42)
    b = permutation_test(studies, 8, seed=42, threads=3)
    assert isinstance(a, HomogeneityTest)
    assert a.null_nus == b.null_nus and a.p_value == b.p_value
    assert a.p_value == permutation_p_value(a.nu_obs, a.null_nus)
    assert a.to_dict()["n_permutations"] == 8


def test_permutation_test_scale_invariant():
    studies = _studies(2, 8.0)
    a = permutation_test(studies, 6, seed=5)
    b = permutation_test([1000.0 * x for x in studies], 6, seed=5)
    assert a.p_value == b.p_value


def test_permutation_test_detects_heterogeneity():
    # ν = p + 3 is strongly heterogeneous; the observed ν̂ sits below every null refit.
    studies = _studies(3, 6.0, sizes=(40, 40, 40, 40))
    res = permutation_test(studies, 19, seed=9)
    assert res.p_value == pytest.approx(1.0 / 20.0)


def test_permutation_test_errors():
    x = np.zeros((5, 2))
    with pytest.raises(DomainError):
        permutation_test([x], 5)
    with pytest.raises(DomainError):
        permutation_test([x, x], 0)
    with pytest.raises(DomainError):
        FitConfig(inner="nope")


@pytest.mark.slow
def test_null_calibration():
    # Homogeneous data: rejection rate at 0.05 over 100 small tests stays moderate.
    p_values = []
    for rep in range(100):
        rng = np.random.default_rng(1000 + rep)
        studies = [rng.standard_normal((10, 2)) for _ in range(3)]
        res = permutation_test(studies, 19, FitConfig(null_max_iter=50), seed=rep)
        p_values.append(res.p_value)
    rate = np.mean(np.asarray(p_values) <= 0.05)
    assert 0.01 <= rate <= 0.10
