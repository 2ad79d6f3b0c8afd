import numpy as np
import pytest

from clustertrial.data import ClusterRecord, TrialDataset
from clustertrial.simulation import ScenarioConfig, generate_dataset


def make_dataset(ybars, A, M, N=None, pi=0.5, spread=0.0, X=None, C=None, seed=0):
    """Small dataset whose cluster means are exactly ``ybars``.

    Each cluster gets ``M_i`` outcomes ``ybar_i + spread * e`` with ``e``
    centred within the cluster, so the mean is preserved.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i, (yb, a, m) in enumerate(zip(ybars, A, M)):
        e = rng.normal(size=m)
        e = e - e.mean() if m > 1 else np.zeros(1)
        x = np.zeros((m, 0)) if X is None else np.asarray(X[i], dtype=float).reshape(m, -1)
        c = np.zeros(0) if C is None else np.atleast_1d(np.asarray(C[i], dtype=float))
        records.append(ClusterRecord(i, int(a), None if N is None else N[i], m, c, yb + spread * e, x))
    return TrialDataset.from_clusters(records, pi=pi)


@pytest.fixture(scope="session")
def scenario1_small():
    return generate_dataset(ScenarioConfig("continuous", 1, m=30), 0)


@pytest.fixture(scope="session")
def scenario4_binary():
    return generate_dataset(ScenarioConfig("binary", 4, m=100), 1)
