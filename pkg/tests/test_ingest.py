import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from rcm.errors import DomainError, MissingValueError, ParseError, SchemaError
from rcm.ingest import (
    Study,
    StudySet,
    cluster_modules,
    load_studies,
    pooled_variance,
    read_matrix,
    select_top_variance,
    to_correlation,
    to_study_data,
    ward_linkage,
)

from conftest import random_spd


def _write(path, header, rows, sep=","):
    path.write_text("\n".join([sep.join(header)] + [sep.join(str(v) for v in r) for r in rows]) + "\n", encoding="utf-8")
    return path


# ------------------------------------------------------------------ loading


def test_load_intersects_features(tmp_path):
    a = _write(tmp_path / "a.csv", ["g1", "g2", "g3", "g4", "g5"], [[1, 2, 3, 4, 5], [6, 7, 8, 9, 10]])
    b = _write(tmp_path / "b.tsv", ["g5", "g3", "x", "g1", "y"], [[1, 2, 3, 4, 5]], sep="\t")
    s = load_studies([a, b])
    assert s.features == ("g1", "g3", "g5") and s.p == 3 and s.k == 2
    np.testing.assert_array_equal(s.studies[0].data, [[1, 3, 5], [6, 8, 10]])
    np.testing.assert_array_equal(s.studies[1].data, [[4, 2, 1]])
    one = load_studies([a])
    assert one.k == 1 and one.p == 5


def test_load_errors(tmp_path):
    na = _write(tmp_path / "na.csv", ["a", "b"], [[1, "NA"]])
    with pytest.raises(MissingValueError):
        load_studies([na])
    bad = _write(tmp_path / "bad.csv", ["a", "b"], [[1, "x1"]])
    with pytest.raises(ParseError):
        read_matrix(bad)
    short = _write(tmp_path / "short.csv", ["a", "b"], [[1]])
    with pytest.raises(ParseError):
        read_matrix(short)
    dup = _write(tmp_path / "dup.csv", ["a", "a"], [[1, 2]])
    with pytest.raises(SchemaError):
        read_matrix(dup)
    other = _write(tmp_path / "other.csv", ["c"], [[1]])
    ok = _write(tmp_path / "ok.csv", ["a"], [[1]])
    with pytest.raises(SchemaError):
        load_studies([ok, other])
    with pytest.raises(FileNotFoundError):
        load_studies([tmp_path / "missing.csv"])
    with pytest.raises(DomainError):
        load_studies([])


# ------------------------------------------------------------ top variance


def _set(*mats):
    mats = [np.asarray(m, dtype=float) for m in mats]
    return StudySet(tuple(Study(f"s{i}", m) for i, m in enumerate(mats)), tuple(f"f{j}" for j in range(mats[0].shape[1])))


def test_pooled_variance_hand_computed():
    # Study means: (2, 10, 0), (5, 0, 1), (0, 4, 1).
    s = _set(
        [[1, 10, 0], [3, 10, 0]],
        [[4, 0, 0], [6, 0, 2]],
        [[0, 1, 1], [0, 7, 1], [0, 4, 1]],
    )
    # Sums of squares: f0 = 2 + 2 + 0, f1 = 0 + 0 + 18, f2 = 0 + 2 + 0; n• - k = 4.
    np.testing.assert_allclose(pooled_variance(s), [1.0, 4.5, 0.5])
    assert select_top_variance(s, 2).features == ("f1", "f0")


def test_top_variance_examples():
    s = _set([[1, 5], [2, 5], [4, 5]])
    assert select_top_variance(s, 2).features == ("f0", "f1")
    tie = _set([[1, 1, 2], [2, 2, 4]])
    assert select_top_variance(tie, 3).features == ("f2", "f0", "f1")
    with pytest.raises(DomainError):
        select_top_variance(s, 0)
    with pytest.raises(DomainError):
        select_top_variance(s, 3)


def test_top_equals_p_keeps_order_when_variances_decrease():
    s = _set([[3, 2, 1], [-3, -2, -1]])
    assert select_top_variance(s, 3).features == s.features


@given(st.integers(0, 2**32 - 1))
def test_top_variance_study_order_invariant(seed):
    rng = np.random.default_rng(seed)
    mats = [rng.standard_normal((int(rng.integers(2, 6)), 6)) * rng.uniform(0.5, 3, 6) for _ in range(3)]
    a = select_top_variance(_set(*mats), 3).features
    b = select_top_variance(_set(*mats[::-1]), 3).features
    assert a == b


# ------------------------------------------------------------ study data


def test_to_study_data_examples():
    x = np.array([[1.0, 2.0]])
    raw = to_study_data(_set(x), center=False)[0]
    np.testing.assert_array_equal(raw.scatter, np.outer(x[0], x[0]))
    cen = to_study_data(_set(x))[0]
    np.testing.assert_array_equal(cen.scatter, np.zeros((2, 2)))
    assert cen.n == 1
    y = np.array([[1.0, 2.0], [3.0, 4.0]])
    d = to_study_data(_set(y), center=False)[0]
    np.testing.assert_array_equal(d.scatter, [[10.0, 14.0], [14.0, 20.0]])


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 5))
def test_centred_scatter_psd(seed, n, p):
    x = np.random.default_rng(seed).standard_normal((n, p)) + 5.0
    d = to_study_data(_set(x))[0]
    s = d.scatter
    assert d.n == n
    assert np.linalg.eigvalsh(s).min() >= -1e-10 * max(1.0, np.abs(s).max())


# ------------------------------------------------------------ correlation


def test_to_correlation_examples(rng):
    np.testing.assert_array_equal(to_correlation(np.diag([4.0, 9.0, 0.5])), np.eye(3))
    np.testing.assert_array_equal(to_correlation([[4.0, 2.0], [2.0, 1.0]]), np.ones((2, 2)))
    r = to_correlation(random_spd(rng, 6))
    assert np.all(np.diag(r) == 1.0)
    with pytest.raises(DomainError):
        to_correlation([[0.0, 0.0], [0.0, 1.0]])


@given(st.integers(0, 2**32 - 1), st.integers(1, 7))
def test_to_correlation_idempotent_and_bounded(seed, p):
    r = to_correlation(random_spd(np.random.default_rng(seed), p, ridge=0.1))
    assert np.all(np.abs(r) <= 1.0)
    np.testing.assert_array_equal(to_correlation(r), r)


# ------------------------------------------------------------ clustering


@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_ward_matches_scipy(seed, p):
    rng = np.random.default_rng(seed)
    r = to_correlation(random_spd(rng, p, ridge=0.5))
    d = 1.0 - np.abs(r)
    np.fill_diagonal(d, 0.0)
    ours = ward_linkage(d)
    ref = linkage(squareform(d, checks=False), method="ward")
    np.testing.assert_allclose(ours[:, 2], ref[:, 2], rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(ours[:, 3], ref[:, 3])
    for k in range(1, p + 1):
        ours_lab = cluster_modules(r, k).labels
        ref_lab = fcluster(ref, k, criterion="maxclust")
        # Same partition up to renaming.
        pairs = set(zip(ours_lab.tolist(), ref_lab.tolist()))
        assert len(pairs) == len(set(ours_lab.tolist())) == len(set(ref_lab.tolist()))


def _partitions(items, k):
    # All set partitions of ``items`` into exactly ``k`` blocks.
    if k == 1:
        yield [list(items)]
        return
    if len(items) == k:
        yield [[i] for i in items]
        return
    first, rest = items[0], items[1:]
    for part in _partitions(rest, k - 1):
        yield [[first]] + part
    for part in _partitions(rest, k):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]


def _within_cost(d, blocks):
    # Ward's objective: sum over blocks of within-block squared distances / (2 |block|).
    return sum(sum(d[i, j] ** 2 for i in b for j in b) / (2 * len(b)) for b in blocks)


@pytest.mark.parametrize("sizes", [(3, 3), (2, 4), (4, 4), (1, 5)])
def test_block_diagonal_recovered_brute_force(sizes):
    p = sum(sizes)
    perm = np.random.default_rng(p).permutation(p)
    blocks = np.repeat(np.arange(len(sizes)), sizes)[perm]
    r = np.where(blocks[:, None] == blocks[None, :], 1.0, 0.1)
    mods = cluster_modules(r, 2)
    d = 1.0 - np.abs(r)
    best = min(_partitions(list(range(p)), 2), key=lambda b: _within_cost(d, b))
    best_lab = np.empty(p, dtype=int)
    for m, b in enumerate(best):
        best_lab[b] = m
    for i, j in itertools.combinations(range(p), 2):
        assert (mods.labels[i] == mods.labels[j]) == (blocks[i] == blocks[j]) == (best_lab[i] == best_lab[j])
    np.testing.assert_allclose(mods.connectivity, np.bincount(blocks)[blocks] - 1.0)


def test_cluster_edge_cases(rng):
    r = to_correlation(random_spd(rng, 5))
    single = cluster_modules(r, 5)
    assert sorted(single.labels.tolist()) == [1, 2, 3, 4, 5]
    np.testing.assert_array_equal(single.connectivity, np.zeros(5))
    one = cluster_modules(r, 1)
    assert set(one.labels.tolist()) == {1} and one.n_modules == 1
    np.testing.assert_allclose(one.connectivity, np.abs(r).sum(axis=1) - 1.0)
    trivial = cluster_modules([[1.0]], 1)
    assert trivial.labels.tolist() == [1] and trivial.connectivity.tolist() == [0.0]
    with pytest.raises(DomainError):
        cluster_modules(r, 0)
    with pytest.raises(DomainError):
        cluster_modules(r, 6)
    csv_text = cluster_modules(r, 2, features=list("abcde")).to_csv()
    assert csv_text.splitlines()[0] == "feature,module,connectivity" and csv_text.splitlines()[1].startswith("a,")


@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_cluster_permutation_invariant(seed, p):
    rng = np.random.default_rng(seed)
    r = to_correlation(random_spd(rng, p, ridge=0.5))
    perm = rng.permutation(p)
    k = int(rng.integers(1, p + 1))
    a = cluster_modules(r, k).labels
    b = cluster_modules(r[np.ix_(perm, perm)], k).labels
    for i, j in itertools.combinations(range(p), 2):
        assert (a[perm[i]] == a[perm[j]]) == (b[i] == b[j])
