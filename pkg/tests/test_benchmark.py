import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcm.benchmark import (
    Z99,
    Scenario,
    run_scenario,
    scenario1,
    scenario2,
    sse,
    summarize,
    timing_csv,
    timing_scenario,
)
from rcm.errors import DimensionMismatch, DomainError
from rcm.sampling import compound_symmetry

from conftest import random_spd


def test_sse_examples():
    s = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert sse(s, s, 5) == 0.0
    assert sse([[2.0]], [[1.0]], 4) == 0.125
    a = s + 0.1
    assert sse(a, s, 10) == pytest.approx(sse(a, s, 5) / 2.0, rel=1e-15)


def test_sse_errors():
    with pytest.raises(DimensionMismatch):
        sse(np.eye(2), np.eye(3), 4)
    with pytest.raises(DomainError):
        sse(np.eye(2), np.eye(2), 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_sse_zero_iff_equal_and_permutation_invariant(seed, p):
    rng = np.random.default_rng(seed)
    b = random_spd(rng, p)
    a = random_spd(rng, p)
    assert sse(b, b, 3) == 0.0
    if not np.array_equal(a, b):
        assert sse(a, b, 3) > 0.0
    perm = rng.permutation(p)
    assert sse(a[np.ix_(perm, perm)], b[np.ix_(perm, perm)], 3) == pytest.approx(sse(a, b, 3), rel=1e-12)


def test_scenario_defaults():
    s1, s2 = scenario1(), scenario2()
    assert (s1.p, s1.k, s1.nu_true, s1.replications) == (20, 3, 30.0, 200)
    assert len(s1.n_grid) == 8 and s1.n_grid[0] == 7 and s1.n_grid[-1] == 40
    np.testing.assert_array_equal(s1.psi_true.entries, compound_symmetry(20, 1.0, 0.5).entries)
    assert s2.p == 100 and s2.n_grid[0] == 35 and s2.n_grid[-1] == 105 and len(s2.n_grid) == 8
    assert Scenario.from_dict(s1.to_dict()).to_dict() == s1.to_dict()


def test_scenario_validation():
    with pytest.raises(DomainError):
        Scenario(p=2, k=2, n_grid=[5], nu_true=3.0, psi_true=np.eye(2))
    with pytest.raises(DomainError):
        Scenario(p=2, k=2, n_grid=[5], nu_true=8.0, psi_true=np.eye(2), replications=0)
    with pytest.raises(DomainError):
        Scenario(p=2, k=2, n_grid=[5], nu_true=8.0, psi_true=np.eye(2), estimators=["bogus"])
    with pytest.raises(DimensionMismatch):
        Scenario(p=3, k=2, n_grid=[5], nu_true=8.0, psi_true=np.eye(2))


def test_summarize_half_width():
    v = [1.0, 2.0, 3.0, 4.0]
    row = summarize("em", 7, v, [0.1] * 4)
    assert row.mean_sse == 2.5
    assert row.ci99 == pytest.approx(Z99 * np.std(v, ddof=1) / 2.0, rel=1e-15)
    assert row.reps == 4 and row.failed == 0


def _small(reps=3, **kw):
    return Scenario(p=3, k=3, n_grid=[5, 10], nu_true=8.0, psi_true=compound_symmetry(3, 1.0, 0.5), replications=reps, seed=11, **kw)


def test_run_scenario_reproducible_and_aggregation():
    a = run_scenario(_small())
    b = run_scenario(_small(), threads=3)
    assert a.sse_values == b.sse_values and a.failures == b.failures
    for r in a.rows:
        vals = a.sse_values[(r.estimator, r.n_i)]
        assert r.reps + r.failed == 3
        assert r.mean_sse == float(np.mean(vals)) and r.mean_sse >= 0 and r.ci99 >= 0
    assert len(a.rows) == 6
    lines = a.to_csv().splitlines()
    assert lines[0] == "estimator,n_i,mean_sse,ci99,mean_seconds,reps,failed" and len(lines) == 7
    assert a.plot_data()["rows"][0]["estimator"] == "pooled"


def test_single_replication_bit_reproducible():
    a = run_scenario(_small(reps=1))
    b = run_scenario(_small(reps=1))
    assert a.to_csv().split("\n")[1].split(",")[:4] == b.to_csv().split("\n")[1].split(",")[:4]


def test_fixed_nu_mode_runs():
    res = run_scenario(_small(reps=2, em_mode="fixed_nu"))
    assert all(math.isfinite(r.mean_sse) for r in res.rows)


def test_homogeneous_limit_estimators_agree():
    sc = Scenario(p=3, k=3, n_grid=[30], nu_true=1e9, psi_true=1e9 * np.eye(3), replications=4, seed=3)
    res = run_scenario(sc)
    m = {r.estimator: r.mean_sse for r in res.rows}
    assert m["em"] == pytest.approx(m["pooled"], rel=0.05)
    assert m["approx_mle"] == pytest.approx(m["pooled"], rel=0.05)


def test_timing_scenario():
    assert timing_scenario([]) == {}
    table = timing_scenario([2], fits_per_p=1)
    assert set(table[2]) == {"pooled", "em", "approx_mle"}
    assert all(v >= 0 for v in table[2].values())
    assert timing_csv(table).splitlines()[0] == "p,estimator,mean_seconds"
    with pytest.raises(DomainError):
        timing_scenario([1])
