"""
Simulation benchmark comparing the pooled, EM and approximate-MLE estimators.

Data are simulated from the model with k studies of equal size ``n_i`` and a
compound-symmetry Ψ. Each estimate of Σ is scored against the expected
covariance ``Ψ / (ν - p - 1)`` by a variance-weighted squared error.
"""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike

from .errors import DimensionMismatch, DomainError, MaxIterationsExceeded, NuSaturationWarning, RcmError
from .estimators import ESTIMATORS, estimate_approx_mle, estimate_em, estimate_pooled, fit_rcm
from .likelihood import StudyData
from .matrixcore import SpdMatrix, as_spd
from .sampling import RcmParams, compound_symmetry, generate_rcm_dataset

__all__ = [
    "Z99",
    "FULL_REPLICATIONS",
    "Scenario",
    "BenchRow",
    "BenchResult",
    "sse",
    "scenario1",
    "scenario2",
    "run_scenario",
    "timing_scenario",
]

FORMAT_VERSION = 1
Z99 = 2.576
FULL_REPLICATIONS = 1000
DEFAULT_REPLICATIONS = 200


def sse(sigma_hat: SpdMatrix | ArrayLike, sigma_true: SpdMatrix | ArrayLike, n: int) -> float:
    """Weighted squared error ``Σ_{i<=j} (Σ̂_ij - Σ_ij)^2 / (n (Σ_ij^2 + Σ_ii Σ_jj))``."""
    a = np.asarray(sigma_hat, dtype=float)
    b = np.asarray(sigma_true, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cannot compare shapes {a.shape} and {b.shape}")
    if n < 1:
        raise DomainError("n must be at least 1")
    d = np.diag(b)
    w = n * (b**2 + np.outer(d, d))
    iu = np.triu_indices(b.shape[0])
    return float(np.sum(((a - b) ** 2 / w)[iu]))


@dataclass
class Scenario:
    p: int
    k: int
    n_grid: list[int]
    nu_true: float
    psi_true: SpdMatrix
    replications: int = DEFAULT_REPLICATIONS
    estimators: list[str] = field(default_factory=lambda: list(ESTIMATORS))
    seed: int = 2015
    em_mode: str = "full"
    name: str = "custom"

    def __post_init__(self) -> None:
        self.psi_true = as_spd(self.psi_true)
        if self.psi_true.dim != self.p:
            raise DimensionMismatch("psi_true does not match p")
        if self.replications < 1:
            raise DomainError("replications must be at least 1")
        if not self.estimators:
            raise DomainError("no estimators selected")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise DomainError(f"unknown estimators {bad}")
        if not self.nu_true > self.p + 1:
            raise DomainError("nu_true must exceed p + 1 so the target E[Σ] exists")
        if any(n < 1 for n in self.n_grid) or self.k < 1:
            raise DomainError("k and every n_i must be positive")
        if self.em_mode not in ("full", "fixed_nu"):
            raise DomainError("em_mode must be 'full' or 'fixed_nu'")

    @property
    def params(self) -> RcmParams:
        return RcmParams(self.psi_true, self.nu_true)

    @property
    def sigma_true(self) -> np.ndarray:
        return self.params.sigma

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "p": self.p,
            "k": self.k,
            "n_grid": list(self.n_grid),
            "nu_true": self.nu_true,
            "psi_true": {"dim": self.p, "rows": self.psi_true.entries.tolist()},
            "replications": self.replications,
            "estimators": list(self.estimators),
            "seed": self.seed,
            "em_mode": self.em_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        p = int(d["p"])
        psi = d.get("psi_true")
        if psi is None:
            cs = d.get("compound_symmetry", [1.0, 0.5])
            psi_m = compound_symmetry(p, float(cs[0]), float(cs[1]))
        else:
            psi_m = SpdMatrix(psi["rows"] if isinstance(psi, dict) else psi)
        return cls(
            p=p,
            k=int(d["k"]),
            n_grid=[int(n) for n in d["n_grid"]],
            nu_true=float(d["nu_true"]),
            psi_true=psi_m,
            replications=int(d.get("replications", DEFAULT_REPLICATIONS)),
            estimators=list(d.get("estimators", ESTIMATORS)),
            seed=int(d.get("seed", 2015)),
            em_mode=d.get("em_mode", "full"),
            name=d.get("name", "custom"),
        )


def _grid(lo: int, hi: int, points: int = 8) -> list[int]:
    return sorted({int(round(v)) for v in np.linspace(lo, hi, points)})


def scenario1(replications: int = DEFAULT_REPLICATIONS, seed: int = 2015, **kw) -> Scenario:
    """p = 20, k = 3, n_i on 8 points in [7, 40], ν = 30, Ψ_ii = 1, Ψ_ij = 0.5."""
    return Scenario(
        p=20, k=3, n_grid=_grid(7, 40), nu_true=30.0, psi_true=compound_symmetry(20, 1.0, 0.5),
        replications=replications, seed=seed, name="scenario1", **kw,
    )


def scenario2(replications: int = DEFAULT_REPLICATIONS, seed: int = 2015, **kw) -> Scenario:
    """p = 100, k = 3, n_i on 8 points in [35, 105], Ψ_ii = 1, Ψ_ij = 0.5.

    ν = 30 is not a valid inverse-Wishart parameter at p = 100 (it needs
    ν > p - 1), so ν = p + 10 = 110 is used, giving the same ICC (0.1) as
    scenario 1.
    """
    return Scenario(
        p=100, k=3, n_grid=_grid(35, 105), nu_true=110.0, psi_true=compound_symmetry(100, 1.0, 0.5),
        replications=replications, seed=seed, name="scenario2", **kw,
    )


@dataclass
class BenchRow:
    estimator: str
    n_i: int
    mean_sse: float
    ci99: float
    mean_seconds: float
    reps: int
    failed: int


@dataclass
class BenchResult:
    """Per-replication scores plus their (estimator, n_i) summaries.

    ``sse_values[(est, n)]`` and ``seconds[(est, n)]`` hold one entry per
    successful replication, in replication order; ``failures[(est, n)]``
    counts the excluded ones.
    """

    scenario: Scenario
    sse_values: dict[tuple[str, int], list[float]]
    seconds: dict[tuple[str, int], list[float]]
    failures: dict[tuple[str, int], int]

    @property
    def rows(self) -> list[BenchRow]:
        out = []
        for n in self.scenario.n_grid:
            for est in self.scenario.estimators:
                out.append(summarize(est, n, self.sse_values[(est, n)], self.seconds[(est, n)], self.failures[(est, n)]))
        return out

    def row(self, estimator: str, n: int) -> BenchRow:
        key = (estimator, n)
        return summarize(estimator, n, self.sse_values[key], self.seconds[key], self.failures[key])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "n_i", "mean_sse", "ci99", "mean_seconds", "reps", "failed"])
        for r in self.rows:
            w.writerow([r.estimator, r.n_i, repr(r.mean_sse), repr(r.ci99), f"{r.mean_seconds:.6g}", r.reps, r.failed])
        return buf.getvalue()

    def plot_data(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "scenario": self.scenario.to_dict(),
            "rows": [r.__dict__ for r in self.rows],
        }


def summarize(estimator: str, n: int, values: Sequence[float], seconds: Sequence[float], failed: int = 0) -> BenchRow:
    """Mean SSE with a 99% normal-approximation half-width ``2.576 sd / sqrt(reps)``."""
    v = np.asarray(values, dtype=float)
    reps = v.size
    if reps == 0:
        return BenchRow(estimator, n, float("nan"), float("nan"), float("nan"), 0, failed)
    sd = float(np.std(v, ddof=1)) if reps > 1 else 0.0
    return BenchRow(
        estimator=estimator,
        n_i=n,
        mean_sse=float(np.mean(v)),
        ci99=float(Z99 * sd / np.sqrt(reps)),
        mean_seconds=float(np.mean(seconds)),
        reps=reps,
        failed=failed,
    )


def _replicate_seed(seed: int, grid_index: int, rep: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(grid_index, rep))
    return int(ss.generate_state(1, np.uint64)[0])


def _fit_sigma(estimator: str, data: list[StudyData], sc: Scenario) -> np.ndarray:
    nu = sc.nu_true
    if estimator == "pooled":
        return estimate_pooled(data, nu)[1].entries
    if estimator == "approx_mle":
        return estimate_approx_mle(data, nu)[1].entries
    if sc.em_mode == "fixed_nu":
        fit = estimate_em(data, nu)
    else:
        fit = fit_rcm(data, inner="em")
    if fit.sigma_hat is None:
        raise DomainError(f"fitted nu {fit.nu_hat:.4g} <= p + 1; Σ̂ undefined")
    return fit.sigma_hat.entries


def _one_replication(sc: Scenario, grid_index: int, n: int, rep: int) -> dict:
    ds = generate_rcm_dataset(_replicate_seed(sc.seed, grid_index, rep), sc.params, [n] * sc.k)
    data = [StudyData.from_observations(x) for x in ds.studies]
    target = sc.sigma_true
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MaxIterationsExceeded)
        warnings.simplefilter("ignore", NuSaturationWarning)
        for est in sc.estimators:
            t0 = time.perf_counter()
            try:
                sigma_hat = _fit_sigma(est, data, sc)
            except (RcmError, np.linalg.LinAlgError):
                out[est] = None
                continue
            out[est] = (sse(sigma_hat, target, n), time.perf_counter() - t0)
    return out


def run_scenario(sc: Scenario, threads: int = 1) -> BenchResult:
    """Run every replication of ``sc`` and collect SSEs and timings.

    Pooled and approximate MLE are given the true ν; EM runs the full
    coordinate ascent (``em_mode="full"``) or EM at the true ν
    (``em_mode="fixed_nu"``). Replication ``r`` at grid point ``g`` uses a
    seed derived from ``(sc.seed, g, r)``, so results do not depend on
    ``threads``.
    """
    jobs = [(g, n, r) for g, n in enumerate(sc.n_grid) for r in range(sc.replications)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda j: _one_replication(sc, *j), jobs))
    else:
        results = [_one_replication(sc, *j) for j in jobs]
    sse_values = {(e, n): [] for n in sc.n_grid for e in sc.estimators}
    seconds = {(e, n): [] for n in sc.n_grid for e in sc.estimators}
    failures = {(e, n): 0 for n in sc.n_grid for e in sc.estimators}
    for (g, n, r), res in zip(jobs, results):
        for est, val in res.items():
            if val is None:
                failures[(est, n)] += 1
            else:
                sse_values[(est, n)].append(val[0])
                seconds[(est, n)].append(val[1])
    return BenchResult(sc, sse_values, seconds, failures)


def timing_scenario(
    p_grid: Sequence[int],
    fits_per_p: int = 10,
    *,
    k: int = 3,
    n: int | None = None,
    nu_offset: float = 10.0,
    estimators: Sequence[str] = ESTIMATORS,
    seed: int = 2015,
) -> dict[int, dict[str, float]]:
    """Mean wall time of full coordinate-ascent fits per estimator and dimension.

    Data for dimension ``p`` have ``k`` studies of ``n`` rows (default ``n = p``),
    ν = ``p + nu_offset`` and compound-symmetry Ψ (1, 0.5). Returns
    ``{p: {estimator: mean_seconds}}``.
    """
    table: dict[int, dict[str, float]] = {}
    for gi, p in enumerate(p_grid):
        if p < 2:
            raise DomainError("timing needs p >= 2")
        rows = n or p
        params = RcmParams(compound_symmetry(p, 1.0, 0.5), p + nu_offset)
        times = {e: [] for e in estimators}
        for f in range(int(fits_per_p)):
            ds = generate_rcm_dataset(_replicate_seed(seed, gi, f), params, [rows] * k)
            data = [StudyData.from_observations(x) for x in ds.studies]
            for est in estimators:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", MaxIterationsExceeded)
                    warnings.simplefilter("ignore", NuSaturationWarning)
                    t0 = time.perf_counter()
                    fit_rcm(data, inner=est)
                    times[est].append(time.perf_counter() - t0)
        table[int(p)] = {e: float(np.mean(v)) for e, v in times.items()}
    return table


def timing_csv(table: dict[int, dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p", "estimator", "mean_seconds"])
    for p, row in table.items():
        for est, secs in row.items():
            w.writerow([p, est, f"{secs:.6g}"])
    return buf.getvalue()


def plot_data_json(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
