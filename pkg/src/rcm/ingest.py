"""
Loading multi-study expression-style data and post-processing fitted covariances.

Input files are delimited text (CSV or TSV), UTF-8, with a header row of
feature names and one sample per subsequent row. Studies are restricted to the
features they all share, in the first file's column order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DomainError, MissingValueError, ParseError, SchemaError
from .likelihood import StudyData
from .matrixcore import SpdMatrix

__all__ = [
    "Study",
    "StudySet",
    "ModuleAssignment",
    "read_matrix",
    "load_studies",
    "select_top_variance",
    "pooled_variance",
    "to_study_data",
    "to_correlation",
    "ward_linkage",
    "cluster_modules",
]

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "?"})


@dataclass(frozen=True)
class Study:
    name: str
    data: NDArray[np.float64]


@dataclass(frozen=True)
class StudySet:
    """Studies over a common, ordered list of features."""

    studies: tuple[Study, ...]
    features: tuple[str, ...]

    def __post_init__(self) -> None:
        p = len(self.features)
        for st in self.studies:
            if st.data.ndim != 2 or st.data.shape[1] != p:
                raise SchemaError(f"study {st.name!r} does not have {p} columns")
            if not np.all(np.isfinite(st.data)):
                raise MissingValueError(f"study {st.name!r} has missing or non-finite values")

    @property
    def p(self) -> int:
        return len(self.features)

    @property
    def k(self) -> int:
        return len(self.studies)

    @property
    def sizes(self) -> list[int]:
        return [st.data.shape[0] for st in self.studies]

    def subset(self, columns: Sequence[int]) -> "StudySet":
        cols = list(columns)
        return StudySet(
            tuple(Study(st.name, st.data[:, cols]) for st in self.studies),
            tuple(self.features[c] for c in cols),
        )


def _sniff_delimiter(path: Path, header: str) -> str:
    if path.suffix.lower() in (".tsv", ".tab"):
        return "\t"
    if path.suffix.lower() == ".csv":
        return ","
    return "\t" if header.count("\t") > header.count(",") else ","


def read_matrix(path: str | Path) -> tuple[list[str], NDArray[np.float64]]:
    """Parse one delimited file into (feature names, ``(n, p)`` array).

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    ParseError
        Malformed rows or non-numeric cells.
    MissingValueError
        Cells such as ``NA`` or empty fields.
    SchemaError
        Missing or duplicated header names.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8-sig")
    first = text.split("\n", 1)[0]
    delim = _sniff_delimiter(path, first)
    rows = [r for r in csv.reader(io.StringIO(text), delimiter=delim) if r and any(c.strip() for c in r)]
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if any(h == "" for h in header):
        raise SchemaError(f"{path}: empty feature name in header")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicated feature names")
    out = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ParseError(f"{path}, line {i + 2}: expected {len(header)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            c = cell.strip()
            if c.lower() in MISSING_TOKENS:
                raise MissingValueError(f"{path}, line {i + 2}, column {header[j]!r}: missing value {cell!r}")
            try:
                out[i, j] = float(c)
            except ValueError:
                raise ParseError(f"{path}, line {i + 2}, column {header[j]!r}: not a number: {cell!r}") from None
            if not math.isfinite(out[i, j]):
                raise MissingValueError(f"{path}, line {i + 2}, column {header[j]!r}: non-finite value {cell!r}")
    return header, out


def load_studies(paths: Sequence[str | Path]) -> StudySet:
    """Read studies and keep the features common to all of them.

    Columns follow the first file's order.
    """
    if not paths:
        raise DomainError("no input files")
    parsed = [(Path(p).stem, *read_matrix(p)) for p in paths]
    common = set(parsed[0][1])
    for _, names, _ in parsed[1:]:
        common &= set(names)
    features = [f for f in parsed[0][1] if f in common]
    if not features:
        raise SchemaError("the studies share no features")
    studies = []
    for name, names, x in parsed:
        index = {f: j for j, f in enumerate(names)}
        studies.append(Study(name, x[:, [index[f] for f in features]]))
    return StudySet(tuple(studies), tuple(features))


def pooled_variance(s: StudySet) -> NDArray[np.float64]:
    """``Σ_i Σ_j (x_ij - x̄_i)^2 / (n• - k)`` per feature, centring within each study."""
    n_tot = sum(s.sizes)
    if n_tot <= s.k:
        raise DomainError("pooled variance needs more samples than studies")
    ss = sum(np.sum((st.data - st.data.mean(axis=0)) ** 2, axis=0) for st in s.studies)
    return ss / (n_tot - s.k)


def select_top_variance(s: StudySet, top: int) -> StudySet:
    """Keep the ``top`` features of largest pooled variance, in rank order.

    Ties keep the original column order.
    """
    if not 1 <= top <= s.p:
        raise DomainError(f"top must lie in [1, {s.p}], got {top}")
    var = pooled_variance(s)
    order = np.argsort(-var, kind="stable")[:top]
    return s.subset(order)


def to_study_data(s: StudySet, center: bool = True) -> list[StudyData]:
    """Scatter matrices ``X_i^T X_i`` (after per-study column centring by default).

    The sample count stays ``n_i`` when centring.
    """
    return [StudyData.from_observations(st.data, center=center) for st in s.studies]


def to_correlation(sigma: SpdMatrix | ArrayLike) -> NDArray[np.float64]:
    """``R_ij = Σ_ij / sqrt(Σ_ii Σ_jj)`` with an exactly unit diagonal.

    Returns a plain array: a positive semidefinite input such as
    ``[[4, 2], [2, 1]]`` has a valid but singular correlation matrix.
    """
    a = np.array(sigma, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError("sigma must be square")
    d = np.diag(a)
    if np.any(~(d > 0)):
        raise DomainError("correlation needs a strictly positive diagonal")
    sd = np.sqrt(d)
    r = a / np.outer(sd, sd)
    r = np.clip(0.5 * (r + r.T), -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r


@dataclass
class ModuleAssignment:
    """Module labels (1-based, numbered by first appearance) and intra-module connectivity.

    ``linkage`` follows scipy's layout: row ``m`` merges clusters ``a`` and
    ``b`` at ``height`` into new cluster ``p + m`` of ``size`` members.
    """

    labels: NDArray[np.int64]
    linkage: NDArray[np.float64]
    connectivity: NDArray[np.float64]
    features: tuple[str, ...] | None = None

    @property
    def n_modules(self) -> int:
        return int(np.unique(self.labels).size)

    def to_csv(self) -> str:
        names = self.features or tuple(f"V{i + 1}" for i in range(self.labels.size))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "module", "connectivity"])
        for f, m, c in zip(names, self.labels, self.connectivity):
            w.writerow([f, int(m), repr(float(c))])
        return buf.getvalue()


def ward_linkage(d: ArrayLike) -> NDArray[np.float64]:
    """Ward agglomeration on a distance matrix, in the Ward.D2 convention.

    Merges use the Lance-Williams update on squared distances::

        d²(ij, k) = [(n_i + n_k) d²(i, k) + (n_j + n_k) d²(j, k) - n_k d²(i, j)] / (n_i + n_j + n_k)

    and heights are reported on the distance scale (square roots). Ties pick
    the lowest pair of cluster ids. Returns an ``(p - 1, 4)`` scipy-style
    linkage matrix.
    """
    d = np.array(d, dtype=float)
    p = d.shape[0]
    if d.ndim != 2 or d.shape[1] != p:
        raise DomainError("distance matrix must be square")
    z = np.zeros((max(p - 1, 0), 4))
    if p < 2:
        return z
    d2 = d**2
    np.fill_diagonal(d2, np.inf)
    ids = list(range(p))  # cluster id held by each active slot
    size = np.ones(p)
    active = np.ones(p, dtype=bool)
    for m in range(p - 1):
        sub = np.where(active[:, None] & active[None, :], d2, np.inf)
        flat = int(np.argmin(sub))
        i, j = divmod(flat, p)
        if ids[i] > ids[j]:
            i, j = j, i
        ni, nj = size[i], size[j]
        dij = d2[i, j]
        z[m] = (ids[i], ids[j], math.sqrt(max(dij, 0.0)), ni + nj)
        nk = size
        upd = ((ni + nk) * d2[i] + (nj + nk) * d2[j] - nk * dij) / (ni + nj + nk)
        d2[i, :] = upd
        d2[:, i] = upd
        d2[i, i] = np.inf
        active[j] = False
        d2[j, :] = np.inf
        d2[:, j] = np.inf
        size[i] = ni + nj
        ids[i] = p + m
    return z


def _cut(z: NDArray[np.float64], p: int, n_modules: int) -> NDArray[np.int64]:
    # Replay the first p - n_modules merges with a union-find.
    parent = list(range(2 * p - 1))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for m in range(p - n_modules):
        a, b = int(z[m, 0]), int(z[m, 1])
        parent[find(a)] = p + m
        parent[find(b)] = p + m
    roots = [find(i) for i in range(p)]
    labels, seen = np.empty(p, dtype=np.int64), {}
    for i, r in enumerate(roots):
        labels[i] = seen.setdefault(r, len(seen) + 1)
    return labels


def cluster_modules(r: SpdMatrix | ArrayLike, n_modules: int = 5, features: Sequence[str] | None = None) -> ModuleAssignment:
    """Ward clustering on ``1 - |R|``, cut into ``n_modules`` modules.

    Connectivity of feature ``i`` is ``Σ_{j != i, same module} |R_ij|``.
    """
    r = np.asarray(r, dtype=float)
    p = r.shape[0]
    if r.ndim != 2 or r.shape[1] != p:
        raise DomainError("correlation matrix must be square")
    if not 1 <= n_modules <= p:
        raise DomainError(f"n_modules must lie in [1, {p}], got {n_modules}")
    if features is not None and len(features) != p:
        raise DomainError("features must have one name per row of R")
    a = np.abs(r)
    d = 1.0 - a
    np.fill_diagonal(d, 0.0)
    z = ward_linkage(np.maximum(d, 0.0))
    labels = _cut(z, p, n_modules)
    same = labels[:, None] == labels[None, :]
    w = np.where(same, a, 0.0)
    np.fill_diagonal(w, 0.0)
    return ModuleAssignment(labels, z, w.sum(axis=1), tuple(features) if features is not None else None)
