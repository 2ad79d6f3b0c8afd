"""Small supervised-learning library for nuisance functions.

Learners are the training mean, GLMs (identity or logit), ridge
regression and a CART regression tree. A stacking ensemble combines them with nonnegative weights
fitted to inner cross-validated predictions.
"""

from dataclasses import dataclass
import warnings

import numpy as np

from . import numerics
from .errors import NonConvergence, SingularMatrix

GLM_IDENTITY = "glm_identity"
GLM_LOGIT = "glm_logit"
RIDGE = "ridge"
TREE = "tree"
MEAN = "mean"

REGRESSION = "regression"
PROBABILITY = "probability"

PROB_CLIP = (0.01, 0.99)
SPLIT_TOL = 1e-12


class DegenerateTarget(UserWarning):
    """Target is constant; the ensemble returns that constant."""


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    lam: float = 1.0
    max_depth: int = 3
    min_leaf: int = 5

    def __post_init__(self):
        if self.kind not in (GLM_IDENTITY, GLM_LOGIT, RIDGE, TREE, MEAN):
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("ridge penalty must be >= 0")
        if self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("max_depth and min_leaf must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {"kind": self.kind, "lam": self.lam, "max_depth": self.max_depth,
                "min_leaf": self.min_leaf}


DEFAULT_LEARNERS = (
    LearnerSpec(MEAN),
    LearnerSpec(GLM_IDENTITY),
    LearnerSpec(RIDGE, lam=1.0),
    LearnerSpec(TREE, max_depth=3, min_leaf=5),
)
DEFAULT_PROBABILITY_LEARNERS = (
    LearnerSpec(MEAN),
    LearnerSpec(GLM_LOGIT),
    LearnerSpec(RIDGE, lam=1.0),
    LearnerSpec(TREE, max_depth=3, min_leaf=5),
)


def _with_intercept(X):
    return np.column_stack([np.ones(len(X)), X])


class _Constant:
    def __init__(self, value):
        self.value = float(value)

    def predict(self, X):
        return np.full(len(X), self.value)


class _Linear:
    """Linear predictor on standardized features, optionally through expit."""

    def __init__(self, center, scale, coef, logistic):
        self.center, self.scale, self.coef, self.logistic = center, scale, coef, logistic

    def predict(self, X):
        Z = _with_intercept((np.asarray(X, dtype=float) - self.center) / self.scale)
        eta = Z @ self.coef
        return numerics.expit(eta) if self.logistic else eta


def _standardize(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return center, scale


def fit_linear(X, y, logistic=False, lam=0.0):
    """GLM (lam=0) or ridge (lam>0) on standardized features.

    Constant columns are dropped; exact collinearity in an unpenalized fit
    falls back to a tiny ridge penalty so a predictor is always returned.
    The intercept is never penalized.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    center, scale = _standardize(X)
    keep = X.std(axis=0) >= 1e-12
    Z = _with_intercept(((X - center) / scale)[:, keep])
    coef = None
    for pen in ((lam,) if lam > 0 else (0.0, 1e-6)):
        P = pen * len(y) * np.eye(Z.shape[1])
        P[0, 0] = 0.0
        try:
            if logistic:
                coef = _penalized_logit(Z, y, P)
            else:
                coef = numerics.solve_linear(Z.T @ Z + P, Z.T @ y)
            break
        except (SingularMatrix, NonConvergence):
            continue
    if coef is None:
        return _Constant(np.clip(y.mean(), *PROB_CLIP) if logistic else y.mean())
    full = np.zeros(X.shape[1] + 1)
    full[0] = coef[0]
    full[1:][keep] = coef[1:]
    return _Linear(center, scale, full, logistic)


def _penalized_logit(Z, y, P):
    beta = np.zeros(Z.shape[1])
    for _ in range(numerics.IRLS_MAX_ITER):
        mu = np.clip(numerics.expit(Z @ beta), numerics.PROB_CLAMP, 1 - numerics.PROB_CLAMP)
        info = (Z.T * (mu * (1 - mu))) @ Z + P
        step = numerics.solve_linear(info, Z.T @ (y - mu) - P @ beta)
        beta = beta + step
        if np.max(np.abs(step)) < numerics.IRLS_TOL:
            if np.any(np.abs(Z @ beta) > numerics.SEPARATION_ETA) and not P.any():
                raise NonConvergence("separation", stage="learner")
            return beta
    raise NonConvergence("logistic learner did not converge", stage="learner")


# --------------------------------------------------------------------- tree

@dataclass(frozen=True)
class Tree:
    """Array-encoded binary tree; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self):
        return int(np.sum(self.feature < 0))

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=int)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            idx = np.nonzero(inner)[0]
            go_left = X[idx, f[inner]] <= self.threshold[node[inner]]
            node[idx] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])


def best_split(X, y, min_leaf):
    """Best SSE split of one node.

    Returns ``(feature, threshold, sse)`` or ``None`` when no admissible
    split lowers the SSE. Candidates are midpoints between consecutive
    distinct sorted values with at least ``min_leaf`` rows on each side.
    Ties go to the lowest feature index, then the smallest threshold.
    """
    n, p = X.shape
    if n < 2 * min_leaf:
        return None
    yc = y - y.mean()
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    ys = yc[order]
    s = np.cumsum(ys, axis=0)[:-1]
    s2 = np.cumsum(ys * ys, axis=0)[:-1]
    nl = np.arange(1, n)[:, None]
    nr = n - nl
    tot, tot2 = s[-1] + ys[-1], s2[-1] + ys[-1] ** 2
    sse = (s2 - s * s / nl) + ((tot2 - s2) - (tot - s) ** 2 / nr)
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    sse = np.where(valid, sse, np.inf)
    # feature-major scan so ties resolve to lowest feature, then smallest threshold
    flat = sse.T.ravel()
    k = int(np.argmin(flat))
    f, pos = divmod(k, n - 1)
    best = flat[k]
    parent = float(np.sum(yc * yc))
    if not best < parent - SPLIT_TOL * max(1.0, parent):
        return None
    thr = 0.5 * (xs[pos, f] + xs[pos + 1, f])
    return f, float(thr), float(best)


def fit_tree(X, y, max_depth=3, min_leaf=5) -> Tree:
    """Greedy CART regression tree minimizing squared error."""
    if min_leaf < 1 or max_depth < 0:
        raise ValueError("min_leaf must be >= 1 and max_depth >= 0")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(float(np.mean(y[idx])))
        if depth >= max_depth:
            return node
        split = best_split(X[idx], y[idx], min_leaf)
        if split is None:
            return node
        f, thr, _ = split
        mask = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.array(value))


# ---------------------------------------------------------------- ensemble

def fit_learner(spec: LearnerSpec, X, y, task=REGRESSION):
    if spec.kind == MEAN:
        return _Constant(np.mean(y))
    if spec.kind == TREE:
        return fit_tree(X, y, spec.max_depth, spec.min_leaf)
    if spec.kind == RIDGE:
        return fit_linear(X, y, logistic=task == PROBABILITY, lam=spec.lam)
    return fit_linear(X, y, logistic=spec.kind == GLM_LOGIT)


@dataclass(frozen=True)
class StackedPredictor:
    learners: tuple
    weights: np.ndarray
    task: str
    cv_loss: np.ndarray

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        out = np.zeros(len(X))
        for w, learner in zip(self.weights, self.learners):
            if w > 0:
                out += w * learner.predict(X)
        if self.task == PROBABILITY:
            out = np.clip(out, *PROB_CLIP)
        return out


def inner_folds(n, k, rng):
    """Fold labels 0..k-1 with sizes differing by at most one."""
    labels = np.arange(n) % k
    return labels[rng.permutation(n)]


def fit_stacking_ensemble(X, y, learner_specs=DEFAULT_LEARNERS, folds_inner=5, task=REGRESSION,
                          rng=None, groups=None) -> StackedPredictor:
    """NNLS stacking of ``learner_specs`` on inner cross-validated predictions.

    ``groups`` keeps rows of one group (cluster) in the same inner fold. The
    number of inner folds drops to ``n_groups // 2`` (at least 2) when there
    are fewer than ``2 * folds_inner`` groups.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    specs = tuple(learner_specs)
    if len(specs) < 1:
        raise ValueError("at least one learner is required")
    if np.ptp(y) < 1e-12:
        warnings.warn("constant target; returning a constant predictor", DegenerateTarget, stacklevel=2)
        # all weight on the first GLM in the library (first learner if none)
        glm = [s for s, spec in enumerate(specs) if spec.kind in (GLM_IDENTITY, GLM_LOGIT)]
        j = glm[0] if glm else 0
        w = np.zeros(len(specs))
        w[j] = 1.0
        const = float(np.clip(y[0], *PROB_CLIP)) if task == PROBABILITY else float(y[0])
        learners = tuple(_Constant(const) if s == j else None for s in range(len(specs)))
        return StackedPredictor(learners, w, task, np.zeros(len(specs)))
    rng = np.random.default_rng(0) if rng is None else rng
    if groups is None:
        groups = np.arange(len(y))
    uniq, ginv = np.unique(groups, return_inverse=True)
    if len(uniq) < 2:
        # a single group leaves nothing to cross-validate; use the mean learner
        kinds = [spec.kind for spec in specs]
        j = kinds.index(MEAN) if MEAN in kinds else 0
        w = np.zeros(len(specs))
        w[j] = 1.0
        learners = tuple(fit_learner(specs[j], X, y, task) if s == j else None for s in range(len(specs)))
        return StackedPredictor(learners, w, task, np.full(len(specs), np.nan))
    k = min(folds_inner, max(2, len(uniq) // 2))
    fold = inner_folds(len(uniq), k, rng)[ginv]

    Z = np.empty((len(y), len(specs)))
    for j in range(k):
        test = fold == j
        for s, spec in enumerate(specs):
            model = fit_learner(spec, X[~test], y[~test], task)
            Z[test, s] = model.predict(X[test])
    cv_loss = np.mean((Z - y[:, None]) ** 2, axis=0)
    w = numerics.nnls(Z, y)
    if w.sum() <= 0:
        w = np.zeros(len(specs))
        w[int(np.argmin(cv_loss))] = 1.0
    else:
        w = w / w.sum()
    learners = tuple(fit_learner(spec, X, y, task) if w[s] > 0 else None
                     for s, spec in enumerate(specs))
    return StackedPredictor(learners, w, task, cv_loss)
