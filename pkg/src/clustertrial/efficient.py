"""Efficient influence-function estimators of the arm means.

For arm ``a`` with ``pi_a = pi^a (1 - pi)^(1 - a)`` the per-cluster score is

    D_i(a) = I{A_i = a} / pi_a * (Ybar_i - eta_a) + kappa_a / pi_a * (eta_a - zeta_a) + zeta_a

and the arm mean is its average (cluster level) or its N-weighted average
(individual level). Parametric nuisances get a stacked sandwich variance,
cross-fitted ones the per-fold centered score variance.
"""

import numpy as np

from . import numerics
from .data import (
    ClusterRecord,
    EstimandSpec,
    Level,
    Population,
    TrialDataset,
    make_result,
    measure_gradient,
)
from .errors import LevelUnavailable, NonFiniteEvaluation, SingularMatrix
from .nuisance import (
    CROSSFIT,
    PARAMETRIC,
    NuisanceFit,
    fit_crossfit_nuisances,
    fit_parametric_nuisances,
)

CENTER_INFLUENCE = "influence"
CENTER_DISPLAY = "display"


def arm_probability(pi, a):
    return pi if a == 1 else 1.0 - pi


def compute_score(cluster: ClusterRecord, a: int, eta: float, zeta: float, kappa: float, pi: float) -> float:
    """Score ``D(a)`` of a single cluster."""
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    if not 0.0 < pi < 1.0:
        raise ValueError("pi must lie in (0, 1)")
    pa = arm_probability(pi, a)
    ybar = float(np.mean(cluster.outcomes))
    ind = 1.0 if cluster.treatment == a else 0.0
    return ind / pa * (ybar - eta) + kappa / pa * (eta - zeta) + zeta


def eff_scores(dataset: TrialDataset, eta, zeta, kappa):
    """Scores for all clusters as an ``(m, 2)`` array, column ``a`` for arm a."""
    D = np.empty((dataset.m, 2))
    ybar = dataset.ybar
    for a in (0, 1):
        pa = arm_probability(dataset.pi, a)
        ind = (dataset.A == a).astype(float)
        D[:, a] = ind / pa * (ybar - eta[:, a]) + kappa[:, a] / pa * (eta[:, a] - zeta[:, a]) + zeta[:, a]
    return D


def level_weights(dataset: TrialDataset, level):
    if Level(level) is Level.CLUSTER:
        return np.ones(dataset.m)
    if dataset.N is None:
        raise LevelUnavailable("the individual-average estimand needs source cluster sizes")
    return dataset.N.astype(float)


def arm_means(D, lam):
    """``(mu1, mu0)`` as lam-weighted averages of the score columns."""
    mu = lam @ D / lam.sum()
    return float(mu[1]), float(mu[0])


def variance_eff_ml(D, folds, grad, lam, m=None, centering=CENTER_INFLUENCE):
    """Per-fold centered variance of ``grad' (mu1, mu0)``.

    ``grad`` is ``(d f / d mu1, d f / d mu0)``. At the cluster level each
    score is centered at its fold mean. At the individual level the default
    ``centering="influence"`` uses ``lam_i (D_i - mu_k)`` with ``mu_k`` the
    fold's lam-weighted mean; ``"display"`` centers ``lam_i D_i`` at its
    plain fold mean. The two agree when lam is constant.
    """
    D = np.asarray(D, dtype=float)
    lam = np.asarray(lam, dtype=float)
    m = len(D) if m is None else m
    folds = np.zeros(len(D), dtype=int) if folds is None else np.asarray(folds)
    g = np.array([grad[1], grad[0]])  # column a=0 pairs with d/d mu0
    proj = D @ g
    total = 0.0
    for k in np.unique(folds):
        idx = folds == k
        if centering == CENTER_INFLUENCE:
            center = np.sum(lam[idx] * proj[idx]) / lam[idx].sum()
            c = lam[idx] * (proj[idx] - center)
        elif centering == CENTER_DISPLAY:
            wp = lam[idx] * proj[idx]
            c = wp - wp.mean()
        else:
            raise ValueError(f"unknown centering {centering!r}")
        total += float(np.sum(c * c))
    return total / lam.sum() ** 2 * m / max(m - 2, 1)


def _stacked_psi(dataset, model, lam, theta_full):
    """Per-cluster stacked estimating functions at ``(theta, mu1, mu0)``."""
    theta, mu1, mu0 = theta_full[:-2], theta_full[-2], theta_full[-1]
    eta, zeta, kappa = model.predictions(theta)
    D = eff_scores(dataset, eta, zeta, kappa)
    centering = np.column_stack([lam * (D[:, 1] - mu1), lam * (D[:, 0] - mu0)])
    return np.hstack([model.scores(theta), centering])


def variance_eff_pm(dataset: TrialDataset, estimand: EstimandSpec, nuisances: NuisanceFit, mu1, mu0):
    """Stacked-equation sandwich variance for parametric nuisances.

    Returns ``(variance, diagnostics)``. A singular bread falls back to the
    single-fold centered score variance and is flagged.
    """
    model = nuisances.model
    lam = level_weights(dataset, estimand.level)
    m = dataset.m
    point = np.concatenate([model.theta(), [mu1, mu0]])
    psi = _stacked_psi(dataset, model, lam, point)
    bread = numerics.numeric_jacobian(lambda t: _stacked_psi(dataset, model, lam, t).sum(axis=0), point)
    meat = psi.T @ psi
    grad = np.asarray(measure_gradient(estimand, mu1, mu0))
    try:
        # the (mu1, mu0) block of J^-1 B J^-T, using J^-T g' = solve(J', e) for the last rows
        P = bread.shape[0]
        sel = np.zeros((P, 2))
        sel[-2, 0] = 1.0
        sel[-1, 1] = 1.0
        left = numerics.solve_linear(bread.T, sel @ grad)
        var = float(left @ meat @ left)
        var *= m / max(m - 2, 1)
        return max(var, 0.0), {"singular_bread": False}
    except SingularMatrix:
        D = eff_scores(dataset, nuisances.eta, nuisances.zeta, nuisances.kappa)
        return variance_eff_ml(D, None, grad, lam, m), {"singular_bread": True}


def estimate_eff(dataset: TrialDataset, estimand: EstimandSpec, nuisances: NuisanceFit,
                 tag=None, centering=CENTER_INFLUENCE):
    """Efficient estimator of the effect with variance matched to the nuisance kind."""
    if estimand.population is Population.UNKNOWN and estimand.level is Level.INDIVIDUAL:
        raise LevelUnavailable("the individual-average estimand needs source cluster sizes")
    lam = level_weights(dataset, estimand.level)
    D = eff_scores(dataset, nuisances.eta, nuisances.zeta, nuisances.kappa)
    mu1, mu0 = arm_means(D, lam)
    diag = dict(nuisances.diagnostics)
    grad = measure_gradient(estimand, mu1, mu0)
    if nuisances.kind == PARAMETRIC and nuisances.model is not None:
        var, extra = variance_eff_pm(dataset, estimand, nuisances, mu1, mu0)
        diag.update(extra)
        tag = tag or "eff-pm"
    else:
        var = variance_eff_ml(D, nuisances.folds, grad, lam, dataset.m, centering)
        tag = tag or ("eff-ml" if nuisances.kind == CROSSFIT else "eff")
    return make_result(estimand, mu1, mu0, var, dataset.m, tag, diagnostics=diag)


def estimate_eff_pm(dataset: TrialDataset, estimand: EstimandSpec = EstimandSpec(), **nuisance_options):
    nuis = fit_parametric_nuisances(dataset, **nuisance_options)
    return estimate_eff(dataset, estimand, nuis)


def estimate_eff_ml(dataset: TrialDataset, estimand: EstimandSpec = EstimandSpec(), K=None, seed=0,
                    learners=None, prob_learners=None, centering=CENTER_INFLUENCE):
    nuis = fit_crossfit_nuisances(dataset, K=K, learners=learners, prob_learners=prob_learners, seed=seed)
    return estimate_eff(dataset, estimand, nuis, centering=centering)


def constant_nuisances(dataset: TrialDataset, level=Level.CLUSTER):
    """Arm-constant outcome nuisances and ``kappa = pi``.

    The constant is the arm mean of Ybar (cluster level) or its N-weighted
    arm mean (individual level), which makes the efficient estimator equal
    the unadjusted arm mean exactly.
    """
    lam = level_weights(dataset, level)
    c = np.empty(2)
    for a in (0, 1):
        arm = dataset.A == a
        c[a] = np.sum(lam[arm] * dataset.ybar[arm]) / lam[arm].sum()
    eta = np.tile(c, (dataset.m, 1))
    kappa = np.tile([1.0 - dataset.pi, dataset.pi], (dataset.m, 1))
    return NuisanceFit(eta, eta.copy(), kappa, "constant", None, None, {})


def estimate_unadjusted(dataset: TrialDataset, estimand: EstimandSpec = EstimandSpec()):
    """Arm-mean contrast of cluster means (N-weighted at the individual level)."""
    nuis = constant_nuisances(dataset, estimand.level)
    return estimate_eff(dataset, estimand, nuis, tag="unadjusted")
