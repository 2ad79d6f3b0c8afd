"""Cluster-average versus individual-average effects on one simulated trial.

When the treatment effect grows with cluster size, weighting every cluster
equally and weighting every person equally target different numbers. This
script fits all five estimators to one scenario-4 trial and prints both.

Run: python notebooks/01_informative_cluster_size.py
"""

import warnings

from clustertrial.data import EstimandSpec
from clustertrial.estimators import ESTIMATORS, run_estimator
from clustertrial.simulation import ScenarioConfig, generate_dataset, true_estimands

config = ScenarioConfig("continuous", 4, m=100)
data = generate_dataset(config, replicate=0)
print(f"{data.m} clusters, {len(data.y)} observed individuals, "
      f"{int(data.A.sum())} treated clusters")

truth = dict(zip(("cluster", "individual"), true_estimands("continuous")))
print(f"true effects: cluster-average {truth['cluster']:.3f}, individual-average {truth['individual']:.3f}\n")

print(f"{'estimator':<12}{'level':<12}{'estimate':>10}{'se':>8}   95% interval")
for name in ESTIMATORS:
    for level in ("cluster", "individual"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = run_estimator(name, data, EstimandSpec(level=level))
        print(f"{name:<12}{level:<12}{res.delta:>10.3f}{res.se:>8.3f}   "
              f"({res.ci_low:.2f}, {res.ci_high:.2f})")

# The GEE and mixed-model fits weight individuals within a cluster by the
# observed size, which depends on treatment here. One trial is too noisy to
# show it; across replicates their cluster-average estimates sit well above
# 6 (try `python notebooks/02_efficiency.py 50 4`).
