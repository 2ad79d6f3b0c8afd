"""Simulation experiments for cluster-randomized trials with informative
cluster size and cluster-dependent enrollment, plus a Monte-Carlo driver.

Each replicate draws from its own counter-based Philox stream keyed by
``(seed, replicate)``, so a replicate's data do not depend on which other
replicates run, in what order, or on how many worker processes are used.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import csv
import io
import math

import numpy as np

from .data import ClusterRecord, TrialDataset
from .errors import ClusterTrialError, TooManyFailures
from .numerics import expit

CONTINUOUS = "continuous"
BINARY = "binary"

CLUSTER_COVARIATES = ("C1", "C2")
INDIV_COVARIATES = ("X1", "X2")

MAX_FAILURE_RATE = 0.05


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Philox4x64 stream for one replicate; the 128-bit key is (seed, replicate)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, replicate], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the simulation design.

    Scenarios 1 and 3 use random observed cluster sizes, 2 and 4
    cluster-dependent ones; 1-2 default to m=30 clusters and 3-4 to m=100.
    """

    experiment: str = CONTINUOUS
    scenario: int = 1
    m: int = None
    seed: int = 2024
    replicates: int = 1000

    def __post_init__(self):
        if self.experiment not in (CONTINUOUS, BINARY):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.scenario not in (1, 2, 3, 4):
            raise ValueError("scenario must be 1..4")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.m is None:
            object.__setattr__(self, "m", 30 if self.scenario in (1, 2) else 100)
        if self.m < 4:
            raise ValueError("m must be >= 4")

    @property
    def cluster_dependent(self) -> bool:
        return self.scenario in (2, 4)


@dataclass(frozen=True)
class PotentialCluster:
    N: int
    C1: float
    C2: int
    X: np.ndarray
    Y1: np.ndarray
    Y0: np.ndarray
    S1: np.ndarray
    S0: np.ndarray
    M1: int
    M0: int
    gamma: float


def observed_sizes(scenario_dependent, N, C2, rng=None):
    """Potential observed sizes (M(1), M(0))."""
    if scenario_dependent:
        return N // 5 + 5 * C2, 3 * int(N == 50) + 3
    m = 9 + int(rng.random() < 0.5)
    return m, m


def _sample_indicator(rng, n, k):
    s = np.zeros(n, dtype=bool)
    s[rng.choice(n, size=k, replace=False)] = True
    return s


def generate_cluster(config: ScenarioConfig, rng: np.random.Generator, cluster_id=0):
    """Draw one cluster's potential data and its observed record."""
    N = 10 if rng.random() < 0.5 else 50
    C1 = rng.normal(N / 10, 2.0)
    C2 = int(rng.random() < expit(math.log(N / 10) * C1))
    X1 = (rng.random(N) < N / 50).astype(float)
    X2 = rng.normal(X1.mean() * (2 * C2 - 1), 3.0, size=N)
    gamma = rng.normal()
    shared = N * math.sin(C1) * (2 * C2 - 1) / 30
    if config.experiment == CONTINUOUS:
        Y1 = rng.normal(N / 5 + shared + 5 * np.exp(X1) * np.abs(X2), 1.0)
        Y0 = rng.normal(gamma + shared + 5 * np.exp(X1) * np.abs(X2), 1.0)
    else:
        root = np.sqrt(np.abs(X2))
        Y1 = (rng.random(N) < expit(-N / 20 + shared + 1.5 * np.exp(X1) * root)).astype(float)
        Y0 = (rng.random(N) < expit(gamma + shared + 1.5 * (2 * X1 - 1) * root)).astype(float)
    M1, M0 = observed_sizes(config.cluster_dependent, N, C2, rng)
    A = int(rng.random() < 0.5)
    S1 = _sample_indicator(rng, N, M1)
    S0 = _sample_indicator(rng, N, M0)
    X = np.column_stack([X1, X2])
    pot = PotentialCluster(N, C1, C2, X, Y1, Y0, S1, S0, M1, M0, gamma)
    S, Y, M = (S1, Y1, M1) if A == 1 else (S0, Y0, M0)
    rec = ClusterRecord(
        cluster_id=cluster_id, treatment=A, source_size=N, observed_size=M,
        cluster_covariates=np.array([C1, float(C2)]), outcomes=Y[S], indiv_covariates=X[S],
    )
    return pot, rec


def generate_dataset(config: ScenarioConfig, replicate: int) -> TrialDataset:
    rng = replicate_rng(config.seed, replicate)
    records = [generate_cluster(config, rng, i)[1] for i in range(config.m)]
    return TrialDataset.from_clusters(records, pi=0.5, cluster_cov_names=CLUSTER_COVARIATES,
                                      indiv_cov_names=INDIV_COVARIATES)


def true_estimands(experiment: str):
    """(Delta_C, Delta_I) for the two experiments.

    Continuous outcomes use the difference scale, where the effect for a
    cluster of size N is N/5 on average, giving E[N/5] = 6 and
    E[N^2/5]/E[N] = 26/3. Binary outcomes use the risk ratio; those values
    come from ``monte_carlo_truth`` rounded to two decimals.
    """
    if experiment == CONTINUOUS:
        return 6.0, 26.0 / 3.0
    if experiment == BINARY:
        return 1.54, 1.18
    raise ValueError(f"unknown experiment {experiment!r}")


def monte_carlo_truth(experiment: str, n_individuals: int = 10 ** 7, seed: int = 7,
                      chunk: int = 2 * 10 ** 6):
    """Monte-Carlo (Delta_C, Delta_I) over simulated source populations.

    Potential-outcome means are averaged with their conditional expectations
    given (N, C, X, gamma), so only covariate sampling noise remains.
    Returns the two effects and the four arm means.
    """
    rng = replicate_rng(seed, 0)
    sums = np.zeros(4)  # cluster-average mu1, mu0 and individual totals mu1, mu0
    n_clusters = 0
    total_n = 0.0
    drawn = 0
    while drawn < n_individuals:
        k = max(int(min(chunk, n_individuals - drawn) / 30), 1)
        N = np.where(rng.random(k) < 0.5, 10, 50)
        C1 = rng.normal(N / 10, 2.0)
        C2 = (rng.random(k) < expit(np.log(N / 10) * C1)).astype(float)
        gamma = rng.normal(size=k)
        group = np.repeat(np.arange(k), N)
        offsets = np.concatenate([[0], np.cumsum(N)])
        X1 = (rng.random(len(group)) < (N / 50)[group]).astype(float)
        x1bar = np.add.reduceat(X1, offsets[:-1]) / N
        X2 = rng.normal((x1bar * (2 * C2 - 1))[group], 3.0)
        shared = (N * np.sin(C1) * (2 * C2 - 1) / 30)[group]
        if experiment == CONTINUOUS:
            base = shared + 5 * np.exp(X1) * np.abs(X2)
            p1 = (N / 5)[group] + base
            p0 = gamma[group] * 0.0 + base  # E[gamma] = 0
        else:
            root = np.sqrt(np.abs(X2))
            p1 = expit((-N / 20)[group] + shared + 1.5 * np.exp(X1) * root)
            p0 = expit(gamma[group] + shared + 1.5 * (2 * X1 - 1) * root)
        t1 = np.add.reduceat(p1, offsets[:-1])
        t0 = np.add.reduceat(p0, offsets[:-1])
        sums += [np.sum(t1 / N), np.sum(t0 / N), np.sum(t1), np.sum(t0)]
        n_clusters += k
        total_n += N.sum()
        drawn += int(N.sum())
    mc1, mc0 = sums[0] / n_clusters, sums[1] / n_clusters
    mi1, mi0 = sums[2] / total_n, sums[3] / total_n
    if experiment == CONTINUOUS:
        return mc1 - mc0, mi1 - mi0, (mc1, mc0, mi1, mi0)
    return mc1 / mc0, mi1 / mi0, (mc1, mc0, mi1, mi0)


# ----------------------------------------------------------- Monte Carlo

@dataclass(frozen=True)
class MetricsRow:
    estimator_tag: str
    level: str
    bias: float
    ese: float
    ase: float
    cp: float
    n_ok: int = 0
    n_failed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cp <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")
        if self.ese < 0 or self.ase < 0:
            raise ValueError("standard errors must be nonnegative")

    @property
    def failure_rate(self) -> float:
        total = self.n_ok + self.n_failed
        return self.n_failed / total if total else 0.0


def experiment_measure(experiment: str) -> str:
    return "difference" if experiment == CONTINUOUS else "ratio"


def run_replicate(config: ScenarioConfig, replicate: int, estimators, levels, options=None):
    """Estimates for one replicate: ``{(estimator, level): (delta, variance, covered) or None}``."""
    from .data import EstimandSpec
    from .estimators import EstimatorOptions, run_estimator

    from dataclasses import replace

    options = replace(options or EstimatorOptions(), seed=config.seed * 100003 + replicate)
    data = generate_dataset(config, replicate)
    truth = dict(zip(("cluster", "individual"), true_estimands(config.experiment)))
    out = {}
    for name in estimators:
        for level in levels:
            spec = EstimandSpec(level=level, measure=experiment_measure(config.experiment))
            try:
                res = run_estimator(name, data, spec, options)
            except (ClusterTrialError, np.linalg.LinAlgError, FloatingPointError):
                out[(name, level)] = None
                continue
            if not (np.isfinite(res.delta) and np.isfinite(res.variance)):
                out[(name, level)] = None
                continue
            covered = res.ci_low <= truth[level] <= res.ci_high
            out[(name, level)] = (res.delta, res.variance, bool(covered))
    return out


def _run_chunk(args):
    config, replicates, estimators, levels, options = args
    return [run_replicate(config, r, estimators, levels, options) for r in replicates]


def summarize(results, truth, estimators, levels):
    """Metrics rows from per-replicate results, in estimator-major order."""
    rows = []
    for name in estimators:
        for level in levels:
            vals = [res[(name, level)] for res in results if res[(name, level)] is not None]
            failed = len(results) - len(vals)
            if vals:
                est = np.array([v[0] for v in vals])
                var = np.array([v[1] for v in vals])
                cov = np.array([v[2] for v in vals], dtype=float)
                ese = float(np.std(est, ddof=1)) if len(est) > 1 else 0.0
                rows.append(MetricsRow(name, level, float(est.mean() - truth[level]), ese,
                                       float(np.mean(np.sqrt(np.maximum(var, 0.0)))),
                                       float(cov.mean()), len(vals), failed))
            else:
                rows.append(MetricsRow(name, level, float("nan"), 0.0, 0.0, 0.0, 0, failed))
    return rows


def run_monte_carlo(config: ScenarioConfig, estimators=("unadjusted", "gee-g", "lmm-g", "eff-pm", "eff-ml"),
                    levels=("cluster", "individual"), workers=1, options=None, check_failures=True):
    """Bias, ESE, ASE and coverage for each estimator and estimand.

    Replicates run on ``workers`` processes in fixed chunks and are reduced
    in replicate order, so the table does not depend on the worker count.
    Failed fits are excluded; more than 5% failures for one estimator raise
    ``TooManyFailures`` (the rows are attached as ``exc.rows``).
    """
    estimators = tuple(estimators)
    levels = tuple(levels)
    if not estimators:
        raise ValueError("estimator set must be nonempty")
    reps = list(range(config.replicates))
    if workers is None or workers > 1:
        import os
        n = workers or os.cpu_count() or 1
        size = max(1, math.ceil(len(reps) / (4 * n)))
        chunks = [(config, reps[i:i + size], estimators, levels, options)
                  for i in range(0, len(reps), size)]
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    else:
        results = _run_chunk((config, reps, estimators, levels, options))
    truth = dict(zip(("cluster", "individual"), true_estimands(config.experiment)))
    rows = summarize(results, truth, estimators, levels)
    if check_failures:
        bad = [r for r in rows if r.failure_rate > MAX_FAILURE_RATE]
        if bad:
            exc = TooManyFailures(", ".join(f"{r.estimator_tag}/{r.level}: {r.failure_rate:.1%} failed"
                                            for r in bad))
            exc.rows = rows
            raise exc
    return rows


CSV_COLUMNS = ("setting", "method", "estimand", "bias", "ese", "ase", "cp", "n_ok", "n_failed")


def setting_label(config: ScenarioConfig) -> str:
    return f"{config.experiment}-scenario{config.scenario}-m{config.m}"


def metrics_csv(rows, config: ScenarioConfig) -> str:
    """Long-format CSV, one line per (method, estimand), fixed 6-decimal floats."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    label = setting_label(config)
    for r in rows:
        writer.writerow([label, r.estimator_tag, r.level, f"{r.bias:.6f}", f"{r.ese:.6f}",
                         f"{r.ase:.6f}", f"{r.cp:.6f}", r.n_ok, r.n_failed])
    return buf.getvalue()


def format_table(rows) -> str:
    lines = [f"{'method':<12}{'estimand':<12}{'bias':>9}{'ESE':>9}{'ASE':>9}{'CP':>7}{'failed':>8}"]
    for r in rows:
        lines.append(f"{r.estimator_tag:<12}{r.level:<12}{r.bias:>9.3f}{r.ese:>9.3f}"
                     f"{r.ase:>9.3f}{r.cp:>7.3f}{r.n_failed:>8d}")
    return "\n".join(lines)
