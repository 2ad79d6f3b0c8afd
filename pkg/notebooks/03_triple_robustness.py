"""Which nuisance models have to be right?

On the scenario-2 design the efficient estimator stays centred when either
the treatment-given-sampling model kappa is right, or both outcome models
(eta for individuals, zeta for clusters) are right. With every model wrong
it is biased. Parametric designs below are passed to the nuisance fitter
as callables.

Run: python notebooks/03_triple_robustness.py [replicates] [clusters]
"""

import sys

import numpy as np

from clustertrial.data import EstimandSpec
from clustertrial.efficient import estimate_eff
from clustertrial.nuisance import fit_parametric_nuisances
from clustertrial.simulation import ScenarioConfig, generate_dataset


def shared(d):
    return d.N * np.sin(d.C[:, 0]) * (2 * d.C[:, 1] - 1) / 30


def eta_right(d, a):
    return np.column_stack([d.expand(d.N), d.expand(shared(d)), np.exp(d.X[:, 0]) * np.abs(d.X[:, 1])])


def zeta_right(d, a):
    return np.column_stack([d.N, shared(d)])


def eta_wrong(d, a):
    return np.column_stack([d.X, d.expand((d.M >= 10).astype(float))])


def zeta_wrong(d, a):
    return np.empty((d.m, 0))


def kappa_wrong(d):
    return d.C[:, :1]


cases = {
    "kappa right": lambda d: dict(eta_design=eta_wrong, zeta_design=zeta_wrong,
                                  kappa_fixed=np.isin(d.M, (2, 7, 10, 15)).astype(float)),
    "eta, zeta right": lambda d: dict(eta_design=eta_right, zeta_design=zeta_right, kappa_design=kappa_wrong),
    "all wrong": lambda d: dict(eta_design=eta_wrong, zeta_design=zeta_wrong, kappa_design=kappa_wrong),
}

replicates = int(sys.argv[1]) if len(sys.argv) > 1 else 40
m = int(sys.argv[2]) if len(sys.argv) > 2 else 1000
config = ScenarioConfig("continuous", 2, m=m)
estimates = {c: [] for c in cases}
for rep in range(replicates):
    data = generate_dataset(config, rep)
    for case, kwargs in cases.items():
        nuis = fit_parametric_nuisances(data, **kwargs(data))
        estimates[case].append(estimate_eff(data, EstimandSpec(), nuis).delta)

print(f"cluster-average effect, truth 6.0, {replicates} replicates of {m} clusters")
for case, values in estimates.items():
    v = np.asarray(values)
    mcse = v.std(ddof=1) / np.sqrt(len(v))
    print(f"{case:<18} bias {v.mean() - 6.0:+.3f}   bias / MC-SE {(v.mean() - 6.0) / mcse:+.1f}")
