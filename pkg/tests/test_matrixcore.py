import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import gammaln

from rcm.errors import DomainError, NotPositiveDefinite
from rcm.matrixcore import SpdMatrix, cholesky, log_det, log_multigamma, spd_inverse

M = [[4.0, 2.0], [2.0, 3.0]]


def test_cholesky_examples():
    np.testing.assert_array_equal(cholesky(np.eye(2)), np.eye(2))
    np.testing.assert_allclose(cholesky(M), [[2.0, 0.0], [1.0, math.sqrt(2.0)]], rtol=1e-15)
    with pytest.raises(NotPositiveDefinite):
        cholesky([[1.0, 2.0], [2.0, 1.0]])


def test_log_det_examples():
    assert log_det(np.eye(3)) == 0.0
    assert log_det(np.diag([2.0, 3.0])) == pytest.approx(math.log(6.0), abs=1e-15)
    assert log_det(M) == pytest.approx(math.log(8.0), abs=1e-15)


def test_spd_inverse_examples():
    np.testing.assert_array_equal(spd_inverse(np.eye(4)).entries, np.eye(4))
    np.testing.assert_allclose(spd_inverse(np.diag([2.0, 5.0])).entries, np.diag([0.5, 0.2]), rtol=1e-15)
    np.testing.assert_allclose(spd_inverse(M).entries, np.array([[3.0, -2.0], [-2.0, 4.0]]) / 8.0, rtol=1e-14)


def test_log_multigamma_examples():
    assert log_multigamma(1, 3.0) == pytest.approx(math.log(2.0), abs=1e-15)
    expected = 0.5 * math.log(math.pi) + math.lgamma(2.0) + math.lgamma(1.5)
    assert log_multigamma(2, 2.0) == pytest.approx(expected, abs=1e-14)
    with pytest.raises(DomainError):
        log_multigamma(3, 0.9)


@given(st.floats(min_value=0.01, max_value=1e6))
def test_log_multigamma_p1_is_scalar_lgamma(t):
    assert log_multigamma(1, t) == gammaln(t)


def test_construction_symmetrizes_and_freezes():
    a = SpdMatrix([[2.0, 1.0 + 1e-13], [1.0, 2.0]])
    np.testing.assert_array_equal(a.entries, a.entries.T)
    with pytest.raises(ValueError):
        a.entries[0, 0] = 5.0


def test_pivot_tolerance_is_scale_relative():
    # Singular up to 1e-14 relative: rejected at any scale.
    for scale in (1e-6, 1.0, 1e8):
        with pytest.raises(NotPositiveDefinite):
            SpdMatrix(scale * np.array([[1.0, 1.0], [1.0, 1.0 + 1e-14]]))
    SpdMatrix(1e-8 * np.eye(3))


def test_non_finite_rejected():
    with pytest.raises(NotPositiveDefinite):
        SpdMatrix([[np.nan, 0.0], [0.0, 1.0]])


@st.composite
def spd(draw):
    p = draw(st.integers(1, 8))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((p, p))
    return a @ a.T + 0.1 * np.eye(p)


@given(spd())
def test_inverse_involution(m):
    back = spd_inverse(spd_inverse(m)).entries
    assert np.linalg.norm(back - m) / np.linalg.norm(m) < 1e-7


@given(spd())
def test_log_det_of_inverse(m):
    assert abs(log_det(spd_inverse(m)) + log_det(m)) < 1e-8


@given(spd())
def test_cholesky_reconstructs(m):
    l = cholesky(m)
    np.testing.assert_array_equal(l, np.tril(l))
    assert np.linalg.norm(l @ l.T - m) / np.linalg.norm(m) < 1e-10
    assert np.linalg.norm(m @ spd_inverse(m).entries - np.eye(m.shape[0])) < 1e-8
