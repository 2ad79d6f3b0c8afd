"""Single entry point that runs any estimator by name with outcome-aware defaults."""

from dataclasses import dataclass, replace

import numpy as np

from . import numerics
from .data import EstimandSpec, Measure, TrialDataset
from .efficient import estimate_eff, estimate_eff_ml, estimate_eff_pm, estimate_unadjusted
from .gee import EXCHANGEABLE, INDEPENDENCE, GeeSpec, estimate_gee
from .learners import LearnerSpec
from .lmm import estimate_lmm
from .nuisance import fit_intercept_only_nuisances, is_binary

UNADJUSTED = "unadjusted"
GEE_G = "gee-g"
LMM_G = "lmm-g"
EFF_PM = "eff-pm"
EFF_ML = "eff-ml"
ESTIMATORS = (UNADJUSTED, GEE_G, LMM_G, EFF_PM, EFF_ML)
DEFAULT_NUISANCE = "default"
INTERCEPT_ONLY = "intercept-only"


@dataclass(frozen=True)
class EstimatorOptions:
    """Tuning shared by the estimators; ``None`` entries follow the outcome type.

    Binary outcomes default to a logit GEE with independence working
    correlation; continuous ones to an identity GEE with exchangeable
    correlation. ``nuisance="intercept-only"`` gives Eff-PM intercept-only
    working models.
    """

    gee_link: str = None
    gee_correlation: str = None
    gee_weights: str = None
    rho_method: str = None
    folds: int = None
    seed: int = 0
    learners: tuple = None
    prob_learners: tuple = None
    eta_mode: str = "individual"
    nuisance: str = "default"

    def resolve(self, dataset: TrialDataset) -> "EstimatorOptions":
        binary = is_binary(dataset.y)
        out = self
        if out.gee_link is None:
            out = replace(out, gee_link=numerics.LOGIT if binary else numerics.IDENTITY)
        if out.gee_correlation is None:
            out = replace(out, gee_correlation=INDEPENDENCE if binary else EXCHANGEABLE)
        return out

    def gee_spec(self) -> GeeSpec:
        kw = dict(link=self.gee_link, correlation=self.gee_correlation, cluster_weights=self.gee_weights)
        if self.rho_method is not None:
            kw["rho_method"] = self.rho_method
        return GeeSpec(**kw)


def default_measure(dataset: TrialDataset) -> Measure:
    return Measure.RATIO if is_binary(dataset.y) else Measure.DIFFERENCE


def run_estimator(name: str, dataset: TrialDataset, estimand: EstimandSpec = EstimandSpec(),
                  options: EstimatorOptions = EstimatorOptions()):
    """Run estimator ``name`` and return its ``EstimateResult``."""
    opts = options.resolve(dataset)
    if name == UNADJUSTED:
        return estimate_unadjusted(dataset, estimand)
    if name == GEE_G:
        return estimate_gee(dataset, estimand, opts.gee_spec())
    if name == LMM_G:
        return estimate_lmm(dataset, estimand)
    if name == EFF_PM:
        if opts.nuisance == INTERCEPT_ONLY:
            return estimate_eff(dataset, estimand, fit_intercept_only_nuisances(dataset, estimand.level))
        if opts.nuisance != DEFAULT_NUISANCE:
            raise ValueError(f"unknown nuisance mode {opts.nuisance!r}")
        return estimate_eff_pm(dataset, estimand, eta_mode=opts.eta_mode)
    if name == EFF_ML:
        learners = tuple(LearnerSpec.from_dict(d) if isinstance(d, dict) else d
                         for d in (opts.learners or ())) or None
        prob = tuple(LearnerSpec.from_dict(d) if isinstance(d, dict) else d
                     for d in (opts.prob_learners or ())) or None
        return estimate_eff_ml(dataset, estimand, K=opts.folds, seed=opts.seed, learners=learners,
                               prob_learners=prob)
    raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}")


def jackknife_variance(name: str, dataset: TrialDataset, estimand: EstimandSpec = EstimandSpec(),
                       options: EstimatorOptions = EstimatorOptions()) -> float:
    """Leave-one-cluster-out jackknife variance ``(m-1)/m sum (d_(i) - d_bar)^2``."""
    m = dataset.m
    est = np.empty(m)
    keep = np.arange(m)
    for i in range(m):
        est[i] = run_estimator(name, dataset.subset(keep[keep != i]), estimand, options).delta
    return float((m - 1) / m * np.sum((est - est.mean()) ** 2))
