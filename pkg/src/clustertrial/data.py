"""Observed-data containers, estimand specification and effect-measure algebra.

A cluster-randomized trial is stored cluster-contiguous: individual rows of
cluster ``i`` occupy ``offsets[i]:offsets[i + 1]`` of the flat outcome and
covariate arrays, so per-cluster sums reduce to ``np.add.reduceat``.
"""

from dataclasses import dataclass, field
from functools import cached_property
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from . import numerics
from .errors import (
    DimensionMismatch,
    DomainError,
    EmptyArm,
    MissingColumn,
    MissingValue,
    NonConstantWithinCluster,
    ValidationError,
)


class Level(str, Enum):
    CLUSTER = "cluster"
    INDIVIDUAL = "individual"


class Measure(str, Enum):
    DIFFERENCE = "difference"
    RATIO = "ratio"
    ODDS_RATIO = "odds-ratio"


class Population(str, Enum):
    SOURCE = "source"
    ENROLLED = "enrolled"
    UNKNOWN = "unknown-n"


@dataclass(frozen=True)
class EstimandSpec:
    level: Level = Level.CLUSTER
    measure: Measure = Measure.DIFFERENCE
    population: Population = Population.SOURCE

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        object.__setattr__(self, "measure", Measure(self.measure))
        object.__setattr__(self, "population", Population(self.population))
        if self.level is Level.INDIVIDUAL and self.population is Population.UNKNOWN:
            raise DomainError("the individual-average effect needs source sizes N")


@dataclass(frozen=True)
class ClusterRecord:
    cluster_id: object
    treatment: int
    source_size: Optional[int]
    observed_size: int
    cluster_covariates: np.ndarray
    outcomes: np.ndarray
    indiv_covariates: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float).reshape(-1)
        c = np.asarray(self.cluster_covariates, dtype=float).reshape(-1)
        x = np.asarray(self.indiv_covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if len(y) else x.reshape(0, 0)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "cluster_covariates", c)
        object.__setattr__(self, "indiv_covariates", x)
        if self.treatment not in (0, 1):
            raise ValidationError(f"cluster {self.cluster_id!r}: treatment must be 0 or 1")
        if self.observed_size < 1:
            raise ValidationError(f"cluster {self.cluster_id!r}: no observed individuals")
        if len(y) != self.observed_size or x.shape[0] != self.observed_size:
            raise DimensionMismatch(f"cluster {self.cluster_id!r}: outcome/covariate rows != M")
        if self.source_size is not None and self.source_size < self.observed_size:
            raise ValidationError(f"cluster {self.cluster_id!r}: N < M")


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Validated cluster-randomized trial data in cluster-contiguous layout.

    ``N`` is ``None`` when source sizes are unknown.
    """

    cluster_ids: tuple
    A: np.ndarray
    N: Optional[np.ndarray]
    M: np.ndarray
    C: np.ndarray
    y: np.ndarray
    X: np.ndarray
    pi: float = 0.5
    cluster_cov_names: tuple = ()
    indiv_cov_names: tuple = ()
    offsets: np.ndarray = field(init=False, repr=False)
    group: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=int)
        M = np.asarray(self.M, dtype=int)
        m = len(A)
        C = np.asarray(self.C, dtype=float).reshape(m, -1)
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float).reshape(len(y), -1)
        for name, arr in (("A", A), ("M", M), ("C", C), ("y", y), ("X", X)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.N is not None:
            N = np.asarray(self.N, dtype=float)
            if N.shape != (m,):
                raise DimensionMismatch("N must have one entry per cluster")
            if np.any(N < M):
                raise ValidationError("source size N smaller than observed size M")
            N.setflags(write=False)
            object.__setattr__(self, "N", N)
        if not 0.0 < self.pi < 1.0:
            raise ValidationError("randomization probability pi must lie in (0, 1)")
        if len(self.cluster_ids) != m or M.shape != (m,):
            raise DimensionMismatch("cluster-level arrays disagree in length")
        if np.any(M < 1):
            raise ValidationError("every cluster needs at least one observed individual")
        if M.sum() != len(y):
            raise DimensionMismatch("sum of M differs from the number of outcome rows")
        if not np.all(np.isin(A, (0, 1))):
            raise ValidationError("treatment must be 0 or 1")
        for arm in (0, 1):
            if np.sum(A == arm) < 2:
                raise EmptyArm(f"arm {arm} has fewer than 2 clusters")
        offsets = np.concatenate([[0], np.cumsum(M)])
        offsets.setflags(write=False)
        group = np.repeat(np.arange(m), M)
        group.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "group", group)
        object.__setattr__(self, "cluster_ids", tuple(self.cluster_ids))
        object.__setattr__(self, "cluster_cov_names", tuple(self.cluster_cov_names))
        object.__setattr__(self, "indiv_cov_names", tuple(self.indiv_cov_names))

    @classmethod
    def from_clusters(cls, clusters: Sequence[ClusterRecord], pi=0.5,
                      cluster_cov_names=(), indiv_cov_names=()):
        if not clusters:
            raise EmptyArm("no clusters")
        q = {len(c.cluster_covariates) for c in clusters}
        p = {c.indiv_covariates.shape[1] for c in clusters}
        if len(q) > 1 or len(p) > 1:
            raise DimensionMismatch("clusters disagree in covariate dimensions")
        p_dim = p.pop()
        has_n = [c.source_size is not None for c in clusters]
        if any(has_n) and not all(has_n):
            raise MissingValue("source size given for some clusters only")
        return cls(
            cluster_ids=tuple(c.cluster_id for c in clusters),
            A=[c.treatment for c in clusters],
            N=[c.source_size for c in clusters] if all(has_n) else None,
            M=[c.observed_size for c in clusters],
            C=np.vstack([c.cluster_covariates for c in clusters]),
            y=np.concatenate([c.outcomes for c in clusters]),
            X=np.vstack([c.indiv_covariates.reshape(c.observed_size, p_dim) for c in clusters]),
            pi=pi,
            cluster_cov_names=cluster_cov_names,
            indiv_cov_names=indiv_cov_names,
        )

    @property
    def m(self) -> int:
        return len(self.A)

    @property
    def q(self) -> int:
        return self.C.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def has_source_size(self) -> bool:
        return self.N is not None

    @property
    def clusters(self):
        out = []
        for i in range(self.m):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            out.append(ClusterRecord(
                cluster_id=self.cluster_ids[i],
                treatment=int(self.A[i]),
                source_size=None if self.N is None else int(self.N[i]),
                observed_size=int(self.M[i]),
                cluster_covariates=self.C[i].copy(),
                outcomes=self.y[lo:hi].copy(),
                indiv_covariates=self.X[lo:hi].copy(),
            ))
        return out

    def cluster_sum(self, values):
        return numerics.segment_sum(values, self.offsets)

    def cluster_mean(self, values):
        values = np.asarray(values, dtype=float)
        s = self.cluster_sum(values)
        return s / (self.M if s.ndim == 1 else self.M[:, None])

    @cached_property
    def ybar(self):
        return self.cluster_mean(self.y)

    @cached_property
    def xbar(self):
        if self.p == 0:
            return np.zeros((self.m, 0))
        return self.cluster_mean(self.X)

    def expand(self, cluster_values):
        """Broadcast a cluster-level array to individual rows."""
        return np.asarray(cluster_values)[self.group]

    def subset(self, index):
        """Dataset restricted to the clusters in ``index`` (order preserved)."""
        index = np.asarray(index, dtype=int)
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in index])
        return TrialDataset(
            cluster_ids=tuple(self.cluster_ids[i] for i in index),
            A=self.A[index], N=None if self.N is None else self.N[index],
            M=self.M[index], C=self.C[index], y=self.y[rows], X=self.X[rows],
            pi=self.pi, cluster_cov_names=self.cluster_cov_names,
            indiv_cov_names=self.indiv_cov_names,
        )

    def with_outcomes(self, y):
        return TrialDataset(
            cluster_ids=self.cluster_ids, A=self.A, N=self.N, M=self.M, C=self.C,
            y=y, X=self.X, pi=self.pi, cluster_cov_names=self.cluster_cov_names,
            indiv_cov_names=self.indiv_cov_names,
        )

    def equals(self, other) -> bool:
        same_n = (self.N is None and other.N is None) or (
            self.N is not None and other.N is not None and np.array_equal(self.N, other.N))
        return (
            self.cluster_ids == other.cluster_ids and same_n and self.pi == other.pi
            and np.array_equal(self.A, other.A) and np.array_equal(self.M, other.M)
            and np.array_equal(self.C, other.C) and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
            and self.cluster_cov_names == other.cluster_cov_names
            and self.indiv_cov_names == other.indiv_cov_names
        )

    def to_rows(self, schema: "ColumnSchema" = None):
        """Individual-level columns, the inverse of ``validate_dataset``."""
        schema = schema or ColumnSchema(
            cluster_covariates=self.cluster_cov_names, indiv_covariates=self.indiv_cov_names,
            source_size="source_size" if self.N is not None else None,
        )
        cols = {
            schema.cluster_id: [self.cluster_ids[g] for g in self.group],
            schema.treatment: self.expand(self.A).tolist(),
            schema.outcome: self.y.tolist(),
        }
        if self.N is not None and schema.source_size:
            cols[schema.source_size] = self.expand(self.N).tolist()
        for k, name in enumerate(schema.cluster_covariates):
            cols[name] = self.expand(self.C[:, k]).tolist()
        for k, name in enumerate(schema.indiv_covariates):
            cols[name] = self.X[:, k].tolist()
        return cols


@dataclass(frozen=True)
class ColumnSchema:
    cluster_id: str = "cluster_id"
    treatment: str = "treatment"
    outcome: str = "outcome"
    source_size: Optional[str] = "source_size"
    cluster_covariates: tuple = ()
    indiv_covariates: tuple = ()


def validate_dataset(raw_rows: Mapping[str, Sequence], schema: ColumnSchema = ColumnSchema(),
                     population=Population.SOURCE, pi=0.5, line_offset=2) -> TrialDataset:
    """Group individual-level records into a validated ``TrialDataset``.

    ``raw_rows`` maps column names to equal-length sequences (a dict of lists
    or a DataFrame). Clusters keep their order of first appearance. In
    enrolled mode ``N`` is set to the observed size ``M``; in unknown-N mode
    no source size is stored. ``line_offset`` converts a row index into a
    file line number for diagnostics (2 for a CSV with one header line).
    """
    population = Population(population)
    required = [schema.cluster_id, schema.treatment, schema.outcome]
    if population is Population.SOURCE:
        if not schema.source_size:
            raise MissingColumn("source-size column required in source-N mode")
        required.append(schema.source_size)
    required += list(schema.cluster_covariates) + list(schema.indiv_covariates)
    for name in required:
        if name not in raw_rows:
            raise MissingColumn("missing required column", column=name)

    ids = list(raw_rows[schema.cluster_id])
    n = len(ids)

    def numeric(name):
        raw = list(raw_rows[name])
        if len(raw) != n:
            raise DimensionMismatch(f"column '{name}' has {len(raw)} rows, expected {n}", column=name)
        out = np.empty(n)
        for r, v in enumerate(raw):
            try:
                val = float(v) if v is not None and v != "" else np.nan
            except (TypeError, ValueError):
                raise ValidationError(f"non-numeric value {v!r}", line=r + line_offset, column=name)
            if not np.isfinite(val):
                raise MissingValue("missing value", line=r + line_offset, column=name)
            out[r] = val
        return out

    for r, v in enumerate(ids):
        if v is None or (isinstance(v, float) and np.isnan(v)) or v == "":
            raise MissingValue("missing cluster id", line=r + line_offset, column=schema.cluster_id)

    a = numeric(schema.treatment)
    y = numeric(schema.outcome)
    nsrc = numeric(schema.source_size) if population is Population.SOURCE else None
    cmat = np.column_stack([numeric(c) for c in schema.cluster_covariates]) if schema.cluster_covariates else np.zeros((n, 0))
    xmat = np.column_stack([numeric(c) for c in schema.indiv_covariates]) if schema.indiv_covariates else np.zeros((n, 0))

    bad = np.flatnonzero(~np.isin(a, (0.0, 1.0)))
    if bad.size:
        raise ValidationError("treatment must be 0 or 1", line=int(bad[0]) + line_offset, column=schema.treatment)

    order = {}
    for r, cid in enumerate(ids):
        order.setdefault(cid, []).append(r)

    cluster_ids, A, N, M, C, rows = [], [], [], [], [], []
    for cid, idx in order.items():
        idx = np.asarray(idx)
        first = idx[0]

        def constant(values, name):
            diff = np.flatnonzero(values[idx] != values[first])
            if diff.size:
                raise NonConstantWithinCluster(
                    f"'{name}' varies within cluster {cid!r}",
                    line=int(idx[diff[0]]) + line_offset, column=name)
            return values[first]

        A.append(int(constant(a, schema.treatment)))
        if nsrc is not None:
            nv = constant(nsrc, schema.source_size)
            if nv != round(nv) or nv < len(idx):
                raise ValidationError(f"source size {nv} invalid for cluster {cid!r} with {len(idx)} rows",
                                      line=int(first) + line_offset, column=schema.source_size)
            N.append(nv)
        for k, name in enumerate(schema.cluster_covariates):
            constant(cmat[:, k], name)
        C.append(cmat[first])
        cluster_ids.append(cid)
        M.append(len(idx))
        rows.append(idx)

    rows = np.concatenate(rows)
    if population is Population.ENROLLED:
        N = M
    elif population is Population.UNKNOWN:
        N = None
    A_arr = np.asarray(A)
    for arm in (0, 1):
        if np.sum(A_arr == arm) < 2:
            raise EmptyArm(f"arm {arm} has fewer than 2 clusters")
    return TrialDataset(
        cluster_ids=tuple(cluster_ids), A=A_arr, N=N, M=M,
        C=np.asarray(C).reshape(len(M), -1), y=y[rows], X=xmat[rows], pi=pi,
        cluster_cov_names=tuple(schema.cluster_covariates),
        indiv_cov_names=tuple(schema.indiv_covariates),
    )


def _check_domain(measure, mu1, mu0):
    measure = Measure(measure)
    if not (np.isfinite(mu1) and np.isfinite(mu0)):
        raise DomainError("arm means must be finite")
    if measure is Measure.RATIO and mu0 == 0:
        raise DomainError("ratio undefined for a zero control mean")
    if measure is Measure.ODDS_RATIO and not (0 < mu1 < 1 and 0 < mu0 < 1):
        raise DomainError("odds ratio needs both arm means strictly inside (0, 1)")
    return measure


def _measure(spec):
    return spec.measure if isinstance(spec, EstimandSpec) else Measure(spec)


def apply_measure(spec, mu1: float, mu0: float) -> float:
    """Effect measure f(mu1, mu0); ``spec`` is an ``EstimandSpec`` or a ``Measure``."""
    measure = _check_domain(_measure(spec), mu1, mu0)
    if measure is Measure.DIFFERENCE:
        return float(mu1 - mu0)
    if measure is Measure.RATIO:
        return float(mu1 / mu0)
    return float(mu1 * (1 - mu0) / (mu0 * (1 - mu1)))


def measure_gradient(spec, mu1: float, mu0: float):
    """Partial derivatives (df/dmu1, df/dmu0)."""
    measure = _check_domain(_measure(spec), mu1, mu0)
    if measure is Measure.DIFFERENCE:
        return 1.0, -1.0
    if measure is Measure.RATIO:
        return 1.0 / mu0, -mu1 / mu0 ** 2
    odds = mu1 * (1 - mu0) / (mu0 * (1 - mu1))
    return odds / (mu1 * (1 - mu1)), -odds / (mu0 * (1 - mu0))


def t_confidence_interval(delta: float, variance: float, dof: int, level: float = 0.95):
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    half = numerics.t_quantile(1 - (1 - level) / 2, dof) * np.sqrt(variance)
    return delta - half, delta + half


@dataclass(frozen=True)
class EstimateResult:
    delta: float
    mu1: float
    mu0: float
    variance: float
    ci_low: float
    ci_high: float
    dof: int
    estimator_tag: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))

    def to_dict(self):
        return {
            "estimator": self.estimator_tag,
            "estimate": self.delta,
            "mu1": self.mu1,
            "mu0": self.mu0,
            "variance": self.variance,
            "se": self.se,
            "dof": self.dof,
            "ci": [self.ci_low, self.ci_high],
            "diagnostics": self.diagnostics,
        }


COVARIATE_SOURCES = ("N", "C", "X")


def individual_design(dataset: TrialDataset, use=COVARIATE_SOURCES):
    """Individual-level covariate block L built from cluster size N, cluster
    covariates C and individual covariates X (any subset, in that order)."""
    blocks = []
    for src in use:
        if src == "N":
            if dataset.N is None:
                continue
            blocks.append(dataset.expand(dataset.N)[:, None])
        elif src == "C":
            blocks.append(dataset.C[dataset.group])
        elif src == "X":
            blocks.append(dataset.X)
        else:
            raise ValueError(f"unknown covariate source {src!r}")
    if not blocks:
        return np.zeros((len(dataset.y), 0))
    return np.hstack(blocks)


def make_result(spec: EstimandSpec, mu1, mu0, variance, m, tag, level=0.95, diagnostics=None, delta=None):
    """Assemble an ``EstimateResult`` with a t-interval on ``m - 2`` dof.

    ``delta`` overrides ``f(mu1, mu0)`` when the caller has it in closed form.
    """
    if delta is None:
        delta = apply_measure(spec, mu1, mu0)
    variance = max(float(variance), 0.0)
    dof = max(int(m) - 2, 1)
    lo, hi = t_confidence_interval(delta, variance, dof, level)
    return EstimateResult(delta, float(mu1), float(mu0), variance, lo, hi, dof, tag,
                          dict(diagnostics or {}))
