"""Generalized estimating equations with weighted g-computation.

The marginal model is ``g(E[Y_ij | U_ij]) = U_ij' beta`` with
``U_ij = (1, A_i, L_ij)`` and a canonical link, so ``D_i = Z_i U_i`` and the
estimating equations reduce to ``sum_i w_i U_i' Z_i^{1/2} R_i^{-1} Z_i^{-1/2}
(Y_i - mu_i) = 0``. The exchangeable inverse is applied in closed form,
``R^{-1} = a I - b_i 1 1'``, so every step is a handful of segment sums.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .data import (
    COVARIATE_SOURCES,
    EstimandSpec,
    Level,
    TrialDataset,
    individual_design,
    make_result,
    measure_gradient,
)
from .errors import NonConvergence, RankDeficientDesign, SingularMatrix, ValidationError

INDEPENDENCE = "independence"
EXCHANGEABLE = "exchangeable"

UNIT = "unit"
SOURCE_SIZE = "source_size"
INVERSE_M = "inverse_m"

RHO_SOURCE_PAIRS = "source"
RHO_OBSERVED_PAIRS = "observed"
RHO_LIANG_ZEGER = "liang-zeger"

MAX_ITER = 100
TOL = 1e-8


@dataclass(frozen=True)
class GeeSpec:
    """Working model for GEE.

    ``cluster_weights=None`` picks unit weights for the cluster-average
    estimand and source-size weights for the individual-average one.
    ``rho_method`` selects the moment estimator of the exchangeable
    correlation. The default ``"liang-zeger"`` uses observed pairs scaled by
    the Pearson dispersion. ``"source"`` and ``"observed"`` skip the
    dispersion and divide by ``N(N-1)/2 - dim(U)`` or ``M(M-1)/2 - dim(U)``
    per cluster; they are only sensible for outcomes with unit dispersion.
    """

    link: str = numerics.IDENTITY
    correlation: str = EXCHANGEABLE
    cluster_weights: str = None
    covariates: tuple = COVARIATE_SOURCES
    rho_method: str = RHO_LIANG_ZEGER

    def weights_for(self, level):
        if self.cluster_weights is not None:
            return self.cluster_weights
        return SOURCE_SIZE if Level(level) is Level.INDIVIDUAL else UNIT


@dataclass(frozen=True)
class GeeFit:
    beta: np.ndarray
    rho: float
    converged: bool
    iterations: int
    spec: GeeSpec
    weights: str
    cluster_weight_values: np.ndarray = field(repr=False)
    covariate_columns: int = 0
    separation: bool = False


def cluster_weight_values(dataset: TrialDataset, kind):
    if kind == UNIT:
        return np.ones(dataset.m)
    if kind == SOURCE_SIZE:
        if dataset.N is None:
            raise ValidationError("source-size weights need N")
        return dataset.N.astype(float)
    if kind == INVERSE_M:
        return 1.0 / dataset.M
    raise ValueError(f"unknown cluster weighting {kind!r}")


def design_matrix(dataset: TrialDataset, covariates=COVARIATE_SOURCES, arm=None):
    """Rows ``U_ij = (1, A_i, L_ij)``; ``arm`` overrides A for g-computation."""
    L = individual_design(dataset, covariates)
    a = dataset.expand(dataset.A) if arm is None else np.full(len(dataset.y), float(arm))
    return np.column_stack([np.ones(len(dataset.y)), a, L])


def rho_bounds(dataset: TrialDataset):
    m_max = int(dataset.M.max())
    lower = -1.0 / (m_max - 1) + 1e-6 if m_max > 1 else -1.0 + 1e-6
    return lower, 1.0 - 1e-6


def estimate_rho(dataset: TrialDataset, beta, link=numerics.IDENTITY, covariates=COVARIATE_SOURCES,
                 method=RHO_LIANG_ZEGER, weights=None, clamp=True):
    """Moment estimator of the exchangeable correlation.

    ``h_i`` sums products of standardized residuals over observed pairs and
    ``k_i`` is the pair count less ``dim(U)``; the estimate is
    ``sum_i w_i h_i / sum_i w_i k_i``, clamped so every ``R_i(rho)`` stays
    positive definite.
    """
    if np.all(dataset.M < 2):
        raise ValidationError("no cluster has two observed individuals; rho is not estimable")
    U = design_matrix(dataset, covariates)
    mu = numerics.inverse_link(link, U @ beta)
    e = (dataset.y - mu) / np.sqrt(numerics.variance_function(link, mu))
    s1 = dataset.cluster_sum(e)
    s2 = dataset.cluster_sum(e * e)
    h = 0.5 * (s1 * s1 - s2)
    w = np.ones(dataset.m) if weights is None else weights
    dim_u = U.shape[1]
    if method == RHO_SOURCE_PAIRS:
        if dataset.N is None:
            raise ValidationError("source-pair moment estimator needs N")
        k = dataset.N * (dataset.N - 1) / 2.0 - dim_u
        rho = np.sum(w * h) / np.sum(w * k)
    elif method == RHO_OBSERVED_PAIRS:
        k = dataset.M * (dataset.M - 1) / 2.0 - dim_u
        rho = np.sum(w * h) / np.sum(w * k)
    elif method == RHO_LIANG_ZEGER:
        phi = np.sum(w * s2) / (np.sum(w * dataset.M) - dim_u)
        pairs = dataset.M * (dataset.M - 1) / 2.0
        rho = np.sum(w * h) / ((np.sum(w * pairs) - dim_u) * phi) if phi > 0 else 0.0
    else:
        raise ValueError(f"unknown rho method {method!r}")
    if not np.isfinite(rho):
        rho = 0.0
    if clamp:
        lo, hi = rho_bounds(dataset)
        rho = float(min(max(rho, lo), hi))
    return float(rho)


def _beta_system(dataset, U, beta, rho, link, w):
    """Score and expected information of the GEE at (beta, rho)."""
    mu = numerics.inverse_link(link, U @ beta)
    v = numerics.variance_function(link, mu)
    sv = np.sqrt(v)
    s = U * sv[:, None]
    r = (dataset.y - mu) / sv
    a = 1.0 / (1.0 - rho)
    b = rho / ((1.0 - rho) * (1.0 + (dataset.M - 1) * rho))
    row_w = dataset.expand(w) * a
    S = dataset.cluster_sum(s)
    R = dataset.cluster_sum(r)
    wb = w * b
    score = s.T @ (row_w * r) - S.T @ (wb * R)
    info = (s.T * row_w) @ s - (S.T * wb) @ S
    return score, info


def fit_gee(dataset: TrialDataset, spec: GeeSpec = GeeSpec(), level=Level.CLUSTER) -> GeeFit:
    """Solve the weighted GEE, alternating beta (Fisher scoring) and rho.

    Convergence is judged on the fitted means and rho (and on beta for the
    identity link). A logit fit whose linear predictor exceeds 30 in
    magnitude is kept but flagged through ``GeeFit.separation``; the
    g-computation means depend on the fitted means only.
    """
    kind = spec.weights_for(level)
    w = cluster_weight_values(dataset, kind)
    U = design_matrix(dataset, spec.covariates)
    exch = spec.correlation == EXCHANGEABLE
    if spec.correlation not in (EXCHANGEABLE, INDEPENDENCE):
        raise ValueError(f"unknown correlation {spec.correlation!r}")

    beta = np.zeros(U.shape[1])
    if spec.link == numerics.LOGIT:
        ybar = np.clip(np.average(dataset.y, weights=dataset.expand(w)), 1e-3, 1 - 1e-3)
        beta[0] = numerics.logit(ybar)
    rho = 0.0
    converged = False
    total = 0
    mu = numerics.inverse_link(spec.link, U @ beta)
    for outer in range(1, MAX_ITER + 1):
        beta_old, rho_old, mu_old = beta.copy(), rho, mu
        for _ in range(MAX_ITER):
            total += 1
            score, info = _beta_system(dataset, U, beta, rho, spec.link, w)
            try:
                step = numerics.solve_linear(info, score)
            except SingularMatrix as exc:
                raise RankDeficientDesign("GEE design is rank deficient") from exc
            mu_prev = numerics.inverse_link(spec.link, U @ beta)
            beta = beta + step
            if spec.link == numerics.IDENTITY or np.max(np.abs(step)) < TOL:
                break
            # under quasi-separation beta drifts while the fitted means settle
            if np.max(np.abs(numerics.inverse_link(spec.link, U @ beta) - mu_prev)) < TOL:
                break
        mu = numerics.inverse_link(spec.link, U @ beta)
        if exch:
            rho = estimate_rho(dataset, beta, spec.link, spec.covariates, spec.rho_method)
        change = max(np.max(np.abs(mu - mu_old)), abs(rho - rho_old))
        if spec.link == numerics.IDENTITY:
            change = max(change, np.max(np.abs(beta - beta_old)))
        if change < TOL or (not exch and spec.link == numerics.IDENTITY):
            converged = True
            break
    separated = spec.link == numerics.LOGIT and bool(np.any(np.abs(U @ beta) > numerics.SEPARATION_ETA))
    return GeeFit(beta, rho, converged, total, spec, kind, w, U.shape[1] - 2, separated)


def _counterfactual_means(dataset, beta, link, covariates):
    """Per-cluster averages of fitted means with A set to 1 and to 0."""
    out = []
    for arm in (1, 0):
        U = design_matrix(dataset, covariates, arm=arm)
        out.append(dataset.cluster_mean(numerics.inverse_link(link, U @ beta)))
    return out[0], out[1]


def level_weights(dataset: TrialDataset, level):
    if Level(level) is Level.CLUSTER:
        return np.ones(dataset.m)
    if dataset.N is None:
        raise ValidationError("individual-average estimand needs N")
    return dataset.N.astype(float)


def g_compute_gee(fit: GeeFit, dataset: TrialDataset, level=Level.CLUSTER):
    """Weighted g-computation arm means (mu1, mu0)."""
    mb1, mb0 = _counterfactual_means(dataset, fit.beta, fit.spec.link, fit.spec.covariates)
    lam = level_weights(dataset, level)
    return float(np.sum(lam * mb1) / lam.sum()), float(np.sum(lam * mb0) / lam.sum())


def gcomp_influence(dataset: TrialDataset, level, fit_weights, shrink, mbar1, mbar0, mu1, mu0):
    """Per-cluster influence rows (m x 2) of the weighted g-computation means.

    ``shrink`` is the per-cluster working-covariance factor
    (``1/(1+(M-1)rho)`` for GEE, ``1/(sigma2 + M tau2)`` for the LMM). The
    arm normalizer is the weighted average of ``w_l M_l shrink_l`` over the
    arm, so the residual term of cluster i is
    ``w_i shrink_i M_i (Ybar_i - mubar_i(a))`` scaled by its inverse.
    """
    lam = level_weights(dataset, level)
    total = lam.sum()
    rows = np.empty((dataset.m, 2))
    ybar = dataset.ybar
    for col, (arm, mbar, mu) in enumerate(((1, mbar1, mu1), (0, mbar0, mu0))):
        ind = (dataset.A == arm).astype(float)
        denom = np.sum(fit_weights * ind * dataset.M * shrink) / total
        resid = fit_weights / lam * ind * shrink * dataset.M * (ybar - mbar)
        rows[:, col] = resid / denom + mbar - mu
    return rows, lam


def influence_variance(rows, lam, grad, m):
    """``(sum lam)^-2 sum_i lam_i^2 (grad' IF_i)^2`` with the m/(m-2) factor."""
    proj = lam * (rows @ np.asarray(grad))
    return float(np.sum(proj ** 2) / lam.sum() ** 2 * m / max(m - 2, 1))


def sandwich_gee(fit: GeeFit, dataset: TrialDataset, level=Level.CLUSTER, estimand=EstimandSpec()):
    mb1, mb0 = _counterfactual_means(dataset, fit.beta, fit.spec.link, fit.spec.covariates)
    mu1, mu0 = g_compute_gee(fit, dataset, level)
    shrink = 1.0 / (1.0 + (dataset.M - 1) * fit.rho)
    rows, lam = gcomp_influence(dataset, level, fit.cluster_weight_values, shrink, mb1, mb0, mu1, mu0)
    grad = measure_gradient(estimand, mu1, mu0)
    return influence_variance(rows, lam, grad, dataset.m)


def estimate_gee(dataset: TrialDataset, estimand: EstimandSpec = EstimandSpec(), spec: GeeSpec = GeeSpec()):
    """GEE-g point estimate, sandwich variance and t-interval."""
    fit = fit_gee(dataset, spec, estimand.level)
    if not fit.converged:
        raise NonConvergence("GEE did not converge", stage="gee")
    mu1, mu0 = g_compute_gee(fit, dataset, estimand.level)
    var = sandwich_gee(fit, dataset, estimand.level, estimand)
    return make_result(estimand, mu1, mu0, var, dataset.m, "gee-g",
                       diagnostics={"rho": fit.rho, "iterations": fit.iterations,
                                    "separation_suspected": fit.separation,
                                    "weights": fit.weights, "beta": fit.beta.tolist()})
