"""Nuisance functions for the efficient estimator.

For arm ``a`` the three nuisances are

* ``eta_a``: outcome regression ``E[Ybar | A=a, X, M, N, C]``,
* ``zeta_a``: cluster-level regression ``E[Ybar | A=a, N, C]``,
* ``kappa_a``: ``P(A=a | M, N, C)``.

All predictions are stored as ``(m, 2)`` arrays whose column ``a`` holds the
prediction for arm ``a``. Parametric fits keep their GLM estimating
equations so the efficient estimator can stack them into one sandwich.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence
import warnings

import numpy as np

from . import numerics
from .data import Level, TrialDataset
from .errors import ArmTooSmall, EmptyTrainingArm, RankDeficientDesign, SeparationSuspected
from .learners import (
    DEFAULT_LEARNERS,
    DEFAULT_PROBABILITY_LEARNERS,
    PROBABILITY,
    REGRESSION,
    fit_stacking_ensemble,
)

PARAMETRIC = "parametric"
CROSSFIT = "crossfit"

KAPPA_CLIP = (0.01, 0.99)
COLLINEAR_TOL = 1e-8
MIN_ARM_CLUSTERS = 3
LOGIT_PENALTIES = (0.0, 1e-3, 1e-2, 1e-1, 1.0)

ETA_INDIVIDUAL = "individual"
ETA_CLUSTER = "cluster"


def is_binary(y) -> bool:
    y = np.asarray(y)
    return bool(np.all((y == 0) | (y == 1)))


def clip_kappa(k1):
    k1 = np.clip(np.asarray(k1, dtype=float), *KAPPA_CLIP)
    return np.column_stack([1.0 - k1, k1])


@dataclass(frozen=True)
class NuisanceFit:
    eta: np.ndarray
    zeta: np.ndarray
    kappa: np.ndarray
    kind: str
    folds: Optional[np.ndarray] = None
    model: Optional["ParametricModel"] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("eta", "zeta", "kappa"):
            v = getattr(self, name)
            if v.ndim != 2 or v.shape[1] != 2:
                raise ValueError(f"{name} must have shape (m, 2)")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} predictions must be finite")


# ------------------------------------------------------------ feature maps

def _cluster_block(dataset: TrialDataset, use_m=True, use_n=True):
    cols = []
    if use_m:
        cols.append(dataset.M[:, None].astype(float))
    if use_n and dataset.N is not None:
        cols.append(dataset.N[:, None].astype(float))
    cols.append(dataset.C)
    return np.hstack(cols) if cols else np.empty((dataset.m, 0))


def eta_features(dataset: TrialDataset, arm=None, with_means=False):
    """Individual rows ``(X_ij, [Xbar_i], M_i, N_i, C_i)``."""
    parts = [dataset.X]
    if with_means:
        parts.append(dataset.xbar[dataset.group])
    parts.append(_cluster_block(dataset)[dataset.group])
    return np.hstack(parts)


def eta_cluster_features(dataset: TrialDataset, arm=None):
    """Cluster rows ``(Xbar_i, M_i, N_i, C_i)`` for modeling Ybar directly."""
    return np.hstack([dataset.xbar, _cluster_block(dataset)])


def zeta_features(dataset: TrialDataset, arm=None):
    return _cluster_block(dataset, use_m=False)


def kappa_features(dataset: TrialDataset):
    return _cluster_block(dataset)


def independent_columns(X, tol=COLLINEAR_TOL):
    """Boolean mask keeping columns not in the span of earlier columns.

    Columns are scaled to unit norm and scanned left to right through the
    diagonal of an unpivoted QR factor.
    """
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=0)
    keep = norms > tol
    if not keep.any():
        return keep
    Z = X / np.where(norms > 0, norms, 1.0)
    out = np.zeros(X.shape[1], dtype=bool)
    basis = np.empty((X.shape[0], 0))
    for j in range(X.shape[1]):
        if not keep[j]:
            continue
        v = Z[:, j] - basis @ (basis.T @ Z[:, j])
        v = v - basis @ (basis.T @ v)
        r = np.linalg.norm(v)
        if r > tol:
            out[j] = True
            basis = np.column_stack([basis, v / r])
    return out


# ------------------------------------------------------ parametric models

@dataclass
class GlmComponent:
    """One working GLM with its estimating equation.

    ``design`` rows are individuals when ``group`` is given, else clusters.
    Rows with ``mask`` set enter the score; predictions are made for every
    row and averaged within cluster for individual-level components.
    """

    name: str
    design: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    link: str
    group: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    dropped: int = 0
    l2: float = 0.0
    weights: Optional[np.ndarray] = None

    @property
    def size(self):
        return self.design.shape[1]

    def fit(self):
        """Solve the score equations.

        A logistic fit that separates (or fails to converge) is refit with
        an increasing ridge penalty until its linear predictor stays within
        +-30; the penalty then enters the estimating equation.
        """
        X = self.design[self.mask]
        y = self.target[self.mask]
        w = None if self.weights is None else self.weights[self.mask]
        if X.shape[0] < X.shape[1]:
            raise RankDeficientDesign(f"{self.name}: fewer rows than columns")
        if self.link != numerics.LOGIT:
            self.theta = numerics.fit_glm_checked(X, y, link=self.link, weights=w,
                                                 stage=self.name).coefficients
            return self
        last = None
        for l2 in LOGIT_PENALTIES:
            fit = numerics.fit_glm(X, y, link=self.link, weights=w, l2=l2, check_separation=False)
            if fit.converged and np.max(np.abs(X @ fit.coefficients)) <= numerics.SEPARATION_ETA:
                self.theta, self.l2 = fit.coefficients, l2
                return self
            last = fit
        raise SeparationSuspected(f"{self.name}: logistic fit separates even with penalty "
                                  f"{LOGIT_PENALTIES[-1]} after {last.iterations} iterations",
                                  stage=self.name)

    def predict(self, theta):
        mu = numerics.inverse_link(self.link, self.design @ theta)
        if self.group is None:
            return mu
        return numerics.segment_sum(mu, self.offsets) / np.diff(self.offsets)

    def scores(self, theta):
        mu = numerics.inverse_link(self.link, self.design @ theta)
        r = self.mask * (self.target - mu)
        if self.weights is not None:
            r = r * self.weights
        s = self.design * r[:, None]
        if self.group is not None:
            s = numerics.segment_sum(s, self.offsets)
        if self.l2:
            s = s - self.l2 * theta / len(s)
        return s


def _component(name, X, target, mask, link, dataset=None, weights=None):
    keep = independent_columns(X[mask])
    comp = GlmComponent(name, X[:, keep], np.asarray(target, dtype=float), mask, link,
                        dropped=int(np.sum(~keep)), weights=weights)
    if dataset is not None:
        comp.group = dataset.group
        comp.offsets = dataset.offsets
    return comp.fit()


@dataclass
class ParametricModel:
    """Working GLMs for (eta_1, eta_0, zeta_1, zeta_0, kappa) on one dataset.

    ``eta`` and ``zeta`` map arm -> component (or ``None`` when tied to
    another nuisance). ``kappa_fixed`` replaces the kappa model by a known
    ``P(A=1 | ...)`` vector.
    """

    eta: dict
    zeta: dict
    kappa: Optional[GlmComponent]
    kappa_fixed: Optional[np.ndarray]
    eta_is_zeta: bool = False

    def components(self):
        out = []
        for a in (1, 0):
            if not self.eta_is_zeta:
                out.append(self.eta[a])
        for a in (1, 0):
            out.append(self.zeta[a])
        if self.kappa is not None:
            out.append(self.kappa)
        return out

    def theta(self):
        return np.concatenate([c.theta for c in self.components()])

    def _split(self, theta):
        out, k = [], 0
        for c in self.components():
            out.append(theta[k:k + c.size])
            k += c.size
        return out

    def predictions(self, theta):
        """``(eta, zeta, kappa)`` as ``(m, 2)`` arrays at parameter ``theta``."""
        parts = dict(zip([id(c) for c in self.components()], self._split(theta)))
        zeta = np.column_stack([self.zeta[a].predict(parts[id(self.zeta[a])]) for a in (0, 1)])
        if self.eta_is_zeta:
            eta = zeta.copy()
        else:
            eta = np.column_stack([self.eta[a].predict(parts[id(self.eta[a])]) for a in (0, 1)])
        if self.kappa is not None:
            k1 = self.kappa.predict(parts[id(self.kappa)])
        else:
            k1 = self.kappa_fixed
        return eta, zeta, clip_kappa(k1)

    def scores(self, theta):
        """Per-cluster stacked GLM score contributions, shape ``(m, dim theta)``."""
        return np.hstack([c.scores(t) for c, t in zip(self.components(), self._split(theta))])


def _arm_counts(dataset):
    n1 = int(np.sum(dataset.A == 1))
    return n1, dataset.m - n1


def fit_parametric_nuisances(dataset: TrialDataset, outcome_link=None,
                             eta_design: Optional[Callable] = None,
                             zeta_design: Optional[Callable] = None,
                             kappa_design: Optional[Callable] = None,
                             kappa_fixed=None, eta_mode=ETA_INDIVIDUAL,
                             eta_equals_zeta=None, outcome_weights=None) -> NuisanceFit:
    """Parametric working models for the three nuisances.

    ``*_design`` callables return the design *without* intercept column
    (one is always prepended): ``eta_design(dataset, arm)`` gives individual
    rows (cluster rows when ``eta_mode="cluster"``), ``zeta_design(dataset,
    arm)`` and ``kappa_design(dataset)`` cluster rows. Returning a zero-width
    array gives an intercept-only model. Columns linearly dependent on
    earlier ones among the training rows are dropped.

    When N is unknown ``eta`` is tied to ``zeta`` and N is left out of all
    designs.

    ``outcome_weights`` (one per cluster) weight the cluster-row outcome
    models, i.e. ``zeta`` and ``eta`` in cluster mode.
    """
    n1, n0 = _arm_counts(dataset)
    if min(n1, n0) < MIN_ARM_CLUSTERS:
        raise ArmTooSmall(f"each arm needs at least {MIN_ARM_CLUSTERS} clusters")
    if outcome_link is None:
        outcome_link = numerics.LOGIT if is_binary(dataset.y) else numerics.IDENTITY
    if eta_equals_zeta is None:
        eta_equals_zeta = dataset.N is None
    if eta_design is None:
        eta_design = eta_features if eta_mode == ETA_INDIVIDUAL else eta_cluster_features
    zeta_design = zeta_design or zeta_features
    kappa_design = kappa_design or kappa_features

    ones_i = np.ones((len(dataset.y), 1))
    ones_c = np.ones((dataset.m, 1))
    eta, zeta = {}, {}
    for a in (1, 0):
        arm = dataset.A == a
        Z = np.hstack([ones_c, np.asarray(zeta_design(dataset, a), dtype=float).reshape(dataset.m, -1)])
        zeta[a] = _component(f"zeta_{a}", Z, dataset.ybar, arm, outcome_link, weights=outcome_weights)
        if eta_equals_zeta:
            continue
        if eta_mode == ETA_INDIVIDUAL:
            E = np.hstack([ones_i, np.asarray(eta_design(dataset, a), dtype=float).reshape(len(dataset.y), -1)])
            eta[a] = _component(f"eta_{a}", E, dataset.y, arm[dataset.group], outcome_link, dataset)
        else:
            E = np.hstack([ones_c, np.asarray(eta_design(dataset, a), dtype=float).reshape(dataset.m, -1)])
            eta[a] = _component(f"eta_{a}", E, dataset.ybar, arm, outcome_link, weights=outcome_weights)

    kappa = None
    fixed = None
    if kappa_fixed is not None:
        fixed = np.broadcast_to(np.asarray(kappa_fixed, dtype=float), (dataset.m,)).copy()
    else:
        K = np.hstack([ones_c, np.asarray(kappa_design(dataset), dtype=float).reshape(dataset.m, -1)])
        kappa = _component("kappa", K, dataset.A, np.ones(dataset.m, dtype=bool), numerics.LOGIT)

    model = ParametricModel(eta, zeta, kappa, fixed, eta_equals_zeta)
    eta_p, zeta_p, kappa_p = model.predictions(model.theta())
    dropped = {c.name: c.dropped for c in model.components() if c.dropped}
    penalties = {c.name: c.l2 for c in model.components() if c.l2}
    return NuisanceFit(eta_p, zeta_p, kappa_p, PARAMETRIC, None, model,
                       {"dropped_columns": dropped, "logit_penalties": penalties,
                        "outcome_link": outcome_link})


def fit_intercept_only_nuisances(dataset: TrialDataset, level=Level.CLUSTER) -> NuisanceFit:
    """Intercept-only eta, zeta and kappa with eta fitted on cluster means.

    At the individual level the outcome intercepts are N-weighted arm means,
    so the efficient estimator reduces to the unadjusted one.
    """
    empty = lambda d, a=None: np.empty((d.m, 0))  # noqa: E731
    w = None
    if Level(level) is Level.INDIVIDUAL and dataset.N is not None:
        w = dataset.N.astype(float)
    return fit_parametric_nuisances(dataset, outcome_link=numerics.IDENTITY, eta_design=empty,
                                    zeta_design=empty, kappa_design=empty, eta_mode=ETA_CLUSTER,
                                    outcome_weights=w)


# --------------------------------------------------------------- crossfit

def fold_assignment(m: int, K: int, rng: np.random.Generator):
    """Random partition of ``m`` clusters into ``K`` folds of near-equal size."""
    labels = np.arange(m) % K
    return labels[rng.permutation(m)]


def _folds_with_both_arms(A, K, rng):
    for attempt in range(2):
        folds = fold_assignment(len(A), K, rng)
        ok = all(np.any(A[folds != k] == 1) and np.any(A[folds != k] == 0) for k in range(K))
        if ok:
            return folds
    raise EmptyTrainingArm("a fold's training set lacks one arm after reshuffling")


def default_folds(m: int) -> int:
    """Largest K with at least ten clusters per fold, kept within [2, 10]."""
    return int(min(10, max(2, m // 10)))


def fit_crossfit_nuisances(dataset: TrialDataset, K: int = None, learners=None, prob_learners=None,
                           seed: int = 0, folds_inner: int = 5, folds=None) -> NuisanceFit:
    """Cross-fitted nuisances from stacking ensembles.

    For each fold k every nuisance is trained on the other folds and
    predicted on fold k only. ``eta`` is trained on individual rows
    ``(X_ij, Xbar_i, M, N, C)`` and averaged within cluster; ``zeta`` and
    ``kappa`` are trained on cluster rows. ``K=None`` picks
    ``default_folds(m)``.
    """
    m = dataset.m
    K = default_folds(m) if K is None else int(K)
    if K < 2:
        raise ValueError("K must be >= 2")
    if K > m:
        raise ValueError("K cannot exceed the number of clusters")
    if m / K < 10:
        warnings.warn(f"m/K < 10 (m={m}, K={K}); cross-fitting folds are small", UserWarning,
                      stacklevel=2)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, 0x5EED],
                                                            dtype=np.uint64)))
    if folds is None:
        folds = _folds_with_both_arms(dataset.A, K, rng)
    binary = is_binary(dataset.y)
    task = PROBABILITY if binary else REGRESSION
    learners = tuple(learners or (DEFAULT_PROBABILITY_LEARNERS if binary else DEFAULT_LEARNERS))
    prob_learners = tuple(prob_learners or DEFAULT_PROBABILITY_LEARNERS)

    tie_eta = dataset.N is None
    Xi = eta_features(dataset, with_means=True)
    Zc = zeta_features(dataset)
    Kc = kappa_features(dataset)
    eta = np.empty((m, 2))
    zeta = np.empty((m, 2))
    k1 = np.empty(m)
    row_fold = folds[dataset.group]
    weights = {}
    for k in range(K):
        test_c = folds == k
        train_c = ~test_c
        test_rows = row_fold == k
        for a in (1, 0):
            tr = train_c & (dataset.A == a)
            zf = fit_stacking_ensemble(Zc[tr], dataset.ybar[tr], learners, folds_inner, task, rng)
            zeta[test_c, a] = zf.predict(Zc[test_c])
            weights[f"zeta_{a}_fold{k}"] = zf.weights.tolist()
            if tie_eta:
                continue
            rows = tr[dataset.group]
            ef = fit_stacking_ensemble(Xi[rows], dataset.y[rows], learners, folds_inner, task, rng,
                                       groups=dataset.group[rows])
            pred = ef.predict(Xi[test_rows])
            sizes = dataset.M[test_c]
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            eta[test_c, a] = numerics.segment_sum(pred, offsets) / sizes
            weights[f"eta_{a}_fold{k}"] = ef.weights.tolist()
        kf = fit_stacking_ensemble(Kc[train_c], dataset.A[train_c].astype(float), prob_learners,
                                   folds_inner, PROBABILITY, rng)
        k1[test_c] = kf.predict(Kc[test_c])
        weights[f"kappa_fold{k}"] = kf.weights.tolist()
    if tie_eta:
        eta = zeta.copy()
    return NuisanceFit(eta, zeta, clip_kappa(k1), CROSSFIT, folds, None,
                       {"stacking_weights": weights, "K": K})
