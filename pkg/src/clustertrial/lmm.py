"""Random-intercept linear mixed model with g-computation.

Model: ``Y_ij = U_ij' alpha + b_i + e_ij`` with ``b_i ~ N(0, tau2)`` and
``e_ij ~ N(0, sigma2)``. Maximum likelihood (not REML), optionally with
cluster weights multiplying each cluster's log-likelihood.

For a fixed variance ratio ``lam = tau2 / sigma2`` both ``alpha`` and
``sigma2`` have closed forms, so the likelihood is maximized over the single
scalar ``lam``: a coarse log-spaced grid brackets the maximum, a bounded
Brent search refines it, and the boundary ``lam = 0`` is always checked.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import optimize

from . import numerics
from .data import (
    COVARIATE_SOURCES,
    EstimandSpec,
    Level,
    Measure,
    TrialDataset,
    make_result,
    measure_gradient,
)
from .errors import RankDeficientDesign, SingularMatrix
from .gee import (
    SOURCE_SIZE,
    UNIT,
    _counterfactual_means,
    cluster_weight_values,
    design_matrix,
    gcomp_influence,
    influence_variance,
    level_weights,
)

SIGMA2_FLOOR = 1e-10
LOG_LAM_RANGE = (-14.0, 10.0)
GRID_POINTS = 49


@dataclass(frozen=True)
class LmmFit:
    alpha: np.ndarray
    sigma2: float
    tau2: float
    loglik: float
    weights: str
    cluster_weight_values: np.ndarray = field(repr=False)
    covariates: tuple = COVARIATE_SOURCES
    degenerate: bool = False
    converged: bool = True

    @property
    def n_weighted(self) -> bool:
        return self.weights == SOURCE_SIZE

    @property
    def rho(self) -> float:
        """Intracluster correlation ``tau2 / (tau2 + sigma2)``."""
        total = self.tau2 + self.sigma2
        return self.tau2 / total if total > 0 else 0.0


def _gls(dataset, U, w, lam):
    """GLS coefficients and weighted quadratic form at variance ratio ``lam``."""
    c = lam / (1.0 + dataset.M * lam)
    rw = dataset.expand(w)
    Us = dataset.cluster_sum(U)
    ys = dataset.cluster_sum(dataset.y)
    wc = w * c
    XtX = (U.T * rw) @ U - (Us.T * wc) @ Us
    Xty = U.T @ (rw * dataset.y) - Us.T @ (wc * ys)
    try:
        alpha = numerics.solve_linear(XtX, Xty)
    except SingularMatrix as exc:
        raise RankDeficientDesign("mixed-model design is rank deficient") from exc
    r = dataset.y - U @ alpha
    rs = dataset.cluster_sum(r)
    Q = float(np.sum(rw * r * r) - np.sum(wc * rs * rs))
    return alpha, max(Q, 0.0)


def loglik(dataset: TrialDataset, alpha, sigma2, tau2, weights=None, covariates=COVARIATE_SOURCES):
    """Weighted marginal Gaussian log-likelihood ``sum_i w_i log p(Y_i)``."""
    U = design_matrix(dataset, covariates)
    w = np.ones(dataset.m) if weights is None else np.asarray(weights, dtype=float)
    r = dataset.y - U @ alpha
    rs = dataset.cluster_sum(r)
    rr = dataset.cluster_sum(r * r)
    M = dataset.M
    lam = tau2 / sigma2
    quad = (rr - lam / (1.0 + M * lam) * rs * rs) / sigma2
    logdet = M * math.log(sigma2) + np.log1p(M * lam)
    return float(-0.5 * np.sum(w * (logdet + quad + M * math.log(2 * math.pi))))


def profile_loglik(dataset: TrialDataset, lam, weights=None, covariates=COVARIATE_SOURCES):
    """Log-likelihood maximized over ``alpha`` and ``sigma2`` at fixed ``lam``."""
    U = design_matrix(dataset, covariates)
    w = np.ones(dataset.m) if weights is None else np.asarray(weights, dtype=float)
    return _profile(dataset, U, w, lam)[0]


def _profile(dataset, U, w, lam):
    alpha, Q = _gls(dataset, U, w, lam)
    n_w = float(np.sum(w * dataset.M))
    sigma2 = max(Q / n_w, SIGMA2_FLOOR)
    ll = -0.5 * (n_w * (math.log(2 * math.pi * sigma2)) + Q / sigma2
                 + float(np.sum(w * np.log1p(dataset.M * lam))))
    return ll, alpha, sigma2


def fit_lmm(dataset: TrialDataset, level=Level.CLUSTER, cluster_weights=None,
            covariates=COVARIATE_SOURCES) -> LmmFit:
    """Maximum-likelihood fit; source-size weights by default for the
    individual-average estimand, unit weights for the cluster-average one."""
    kind = cluster_weights or (SOURCE_SIZE if Level(level) is Level.INDIVIDUAL else UNIT)
    w = cluster_weight_values(dataset, kind)
    U = design_matrix(dataset, covariates)

    if np.var(dataset.y) < 1e-12:
        # constant outcome: residuals vanish for any ratio, keep tau2 = 0
        ll, alpha, sigma2 = _profile(dataset, U, w, 0.0)
        return LmmFit(alpha, sigma2, 0.0, ll, kind, w, tuple(covariates), True, True)

    def neg(log_lam):
        return -_profile(dataset, U, w, math.exp(log_lam))[0]

    grid = np.linspace(*LOG_LAM_RANGE, GRID_POINTS)
    values = np.array([neg(g) for g in grid])
    k = int(np.argmin(values))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, GRID_POINTS - 1)]
    res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    candidates = [(values[k], math.exp(grid[k])), (res.fun, math.exp(res.x))]
    ll0 = -_profile(dataset, U, w, 0.0)[0]
    candidates.append((ll0, 0.0))
    best, lam = min(candidates, key=lambda t: t[0])
    ll, alpha, sigma2 = _profile(dataset, U, w, lam)
    degenerate = sigma2 <= SIGMA2_FLOOR
    return LmmFit(alpha, sigma2, lam * sigma2, ll, kind, w, tuple(covariates), degenerate,
                  bool(res.success) and np.isfinite(ll))


def g_compute_lmm(fit: LmmFit, dataset: TrialDataset, level=Level.CLUSTER):
    mb1, mb0 = _counterfactual_means(dataset, fit.alpha, numerics.IDENTITY, fit.covariates)
    lam = level_weights(dataset, level)
    return float(np.sum(lam * mb1) / lam.sum()), float(np.sum(lam * mb0) / lam.sum())


def sandwich_lmm(fit: LmmFit, dataset: TrialDataset, level=Level.CLUSTER, estimand=EstimandSpec()):
    """Robust variance of the LMM g-computation estimator.

    Same construction as for GEE with the working correlation replaced by
    ``tau2 / (tau2 + sigma2)``.
    """
    mb1, mb0 = _counterfactual_means(dataset, fit.alpha, numerics.IDENTITY, fit.covariates)
    mu1, mu0 = g_compute_lmm(fit, dataset, level)
    shrink = 1.0 / (1.0 + (dataset.M - 1) * fit.rho)
    rows, lam = gcomp_influence(dataset, level, fit.cluster_weight_values, shrink, mb1, mb0, mu1, mu0)
    return influence_variance(rows, lam, measure_gradient(estimand, mu1, mu0), dataset.m)


def estimate_lmm(dataset: TrialDataset, estimand: EstimandSpec = EstimandSpec(), cluster_weights=None,
                 covariates=COVARIATE_SOURCES):
    fit = fit_lmm(dataset, estimand.level, cluster_weights, covariates)
    mu1, mu0 = g_compute_lmm(fit, dataset, estimand.level)
    var = sandwich_lmm(fit, dataset, estimand.level, estimand)
    # with an identity link the g-computation difference is the treatment coefficient
    delta = float(fit.alpha[1]) if estimand.measure is Measure.DIFFERENCE else None
    return make_result(estimand, mu1, mu0, var, dataset.m, "lmm-g", delta=delta,
                       diagnostics={"sigma2": fit.sigma2, "tau2": fit.tau2, "loglik": fit.loglik,
                                    "weights": fit.weights, "alpha_A": float(fit.alpha[1]),
                                    "degenerate_outcome": fit.degenerate})
