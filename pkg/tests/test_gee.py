import numpy as np
import pytest

from clustertrial import numerics
from clustertrial.data import EstimandSpec, Level, Measure
from clustertrial.estimators import GEE_G, jackknife_variance, run_estimator
from clustertrial.gee import (
    EXCHANGEABLE,
    INDEPENDENCE,
    RHO_SOURCE_PAIRS,
    SOURCE_SIZE,
    GeeSpec,
    estimate_gee,
    estimate_rho,
    fit_gee,
    g_compute_gee,
    sandwich_gee,
)
from clustertrial.simulation import ScenarioConfig, generate_dataset

from conftest import make_dataset

INDEP = GeeSpec(correlation=INDEPENDENCE)


def test_arm_pooled_means_give_intercept_and_effect():
    data = make_dataset([1.0, 1.0, 2.0, 2.0], [0, 0, 1, 1], [2, 3, 2, 4], spread=0.5)
    fit = fit_gee(data, INDEP)
    np.testing.assert_allclose(fit.beta, [1.0, 1.0], atol=1e-12)


def test_constant_outcome():
    data = make_dataset([5.0] * 6, [0, 1] * 3, [2, 3, 4, 2, 3, 4])
    res = estimate_gee(data)
    assert res.delta == pytest.approx(0.0, abs=1e-10)
    assert res.mu1 == pytest.approx(5.0)
    assert res.variance == pytest.approx(0.0, abs=1e-20)


def test_exchangeable_equal_sizes_is_mean_of_cluster_means():
    rng = np.random.default_rng(0)
    ybars = rng.normal(size=10)
    A = [0, 1] * 5
    data = make_dataset(ybars, A, [4] * 10, spread=1.0)
    res = estimate_gee(data, spec=GeeSpec(correlation=EXCHANGEABLE))
    A = np.array(A)
    assert res.mu1 == pytest.approx(ybars[A == 1].mean(), abs=1e-10)
    assert res.mu0 == pytest.approx(ybars[A == 0].mean(), abs=1e-10)


def pairs_dataset(pairs):
    records_y = [np.array(p, dtype=float) for p in pairs]
    data = make_dataset([0.0] * len(pairs), [0, 1, 0, 1], [2] * len(pairs), N=[2] * len(pairs))
    return data.with_outcomes(np.concatenate(records_y))


def test_rho_zero_when_pair_products_cancel():
    data = pairs_dataset([(1, 1), (1, -1), (1, 1), (1, -1)])
    rho = estimate_rho(data, np.zeros(3), method=RHO_SOURCE_PAIRS, clamp=False)
    assert rho == pytest.approx(0.0, abs=1e-15)


def test_rho_hand_computed():
    # products 1, 1, -1, 4; each cluster has 1 pair less dim(U) = 3
    data = pairs_dataset([(1, 1), (1, 1), (1, -1), (2, 2)])
    rho = estimate_rho(data, np.zeros(3), method=RHO_SOURCE_PAIRS, clamp=False)
    assert rho == pytest.approx(5.0 / -8.0)


def test_rho_clamped_into_positive_definite_range():
    data = pairs_dataset([(1, 1), (1, 1), (1, -1), (2, 2)])
    rho = estimate_rho(data, np.zeros(3), method=RHO_SOURCE_PAIRS)
    assert -1.0 < rho < 1.0


def test_identity_gcomputation_equals_treatment_coefficient(scenario1_small):
    fit = fit_gee(scenario1_small)
    mu1, mu0 = g_compute_gee(fit, scenario1_small)
    assert mu1 - mu0 == pytest.approx(fit.beta[1], abs=1e-10)


def test_logit_gcomputation_by_direct_evaluation(scenario4_binary):
    data = scenario4_binary
    spec = GeeSpec(link=numerics.LOGIT, correlation=INDEPENDENCE)
    fit = fit_gee(data, spec)
    mu1, mu0 = g_compute_gee(fit, data)
    b = fit.beta
    L = np.column_stack([data.expand(data.N), data.C[data.group], data.X])
    for arm, mu in ((1, mu1), (0, mu0)):
        p = 1.0 / (1.0 + np.exp(-(b[0] + b[1] * arm + L @ b[2:])))
        per_cluster = [p[data.group == i].mean() for i in range(data.m)]
        assert mu == pytest.approx(np.mean(per_cluster), abs=1e-12)


def test_equal_source_sizes_make_levels_agree():
    rng = np.random.default_rng(1)
    M = rng.integers(2, 8, size=12)
    data = make_dataset(rng.normal(size=12), [0, 1] * 6, M, N=[20] * 12, spread=1.0)
    # a constant N is collinear with the intercept, so leave it out
    c = estimate_gee(data, EstimandSpec(level=Level.CLUSTER), GeeSpec(covariates=("X",)))
    i = estimate_gee(data, EstimandSpec(level=Level.INDIVIDUAL), GeeSpec(covariates=("X",)))
    assert c.delta == pytest.approx(i.delta, abs=1e-10)
    assert c.variance == pytest.approx(i.variance, rel=1e-8)


def test_independence_sandwich_matches_ratio_estimator_formula():
    rng = np.random.default_rng(2)
    m = 14
    M = rng.integers(1, 9, size=m)
    A = np.array([0, 1] * 7)
    ybars = rng.normal(size=m) + A
    data = make_dataset(ybars, A, M, spread=1.0)
    fit = fit_gee(data, INDEP)
    var = sandwich_gee(fit, data)
    # delta-method variance of the two pooled (M-weighted) arm means
    oracle = 0.0
    for arm in (0, 1):
        sel = A == arm
        mu = np.sum(M[sel] * ybars[sel]) / M[sel].sum()
        oracle += np.sum(M[sel] ** 2 * (ybars[sel] - mu) ** 2) / M[sel].sum() ** 2
    assert var == pytest.approx(oracle * m / (m - 2), rel=1e-10)


def test_weighted_independence_matches_weighted_least_squares():
    rng = np.random.default_rng(3)
    m = 16
    M = rng.integers(2, 6, size=m)
    N = M + rng.integers(0, 20, size=m)
    X = [rng.normal(size=(k, 2)) for k in M]
    data = make_dataset(rng.normal(size=m), [0, 1] * 8, M, N=N, spread=1.0, X=X)
    fit = fit_gee(data, GeeSpec(correlation=INDEPENDENCE, cluster_weights=SOURCE_SIZE))
    U = np.column_stack([np.ones(len(data.y)), data.expand(data.A), data.expand(data.N), data.X])
    sw = np.sqrt(data.expand(data.N).astype(float))
    oracle = np.linalg.lstsq(U * sw[:, None], data.y * sw, rcond=None)[0]
    np.testing.assert_allclose(fit.beta, oracle, atol=1e-8)


def test_ratio_measure_uses_delta_method(scenario4_binary):
    spec = GeeSpec(link=numerics.LOGIT, correlation=INDEPENDENCE)
    diff = estimate_gee(scenario4_binary, EstimandSpec(measure=Measure.DIFFERENCE), spec)
    ratio = estimate_gee(scenario4_binary, EstimandSpec(measure=Measure.RATIO), spec)
    assert ratio.delta == pytest.approx(diff.mu1 / diff.mu0)
    assert ratio.variance > 0


def test_sandwich_se_close_to_jackknife():
    config = ScenarioConfig("continuous", 3, m=100)
    ase, jse = [], []
    for rep in range(3):
        data = generate_dataset(config, rep)
        ase.append(run_estimator(GEE_G, data).se)
        jse.append(np.sqrt(jackknife_variance(GEE_G, data)))
    assert np.mean(ase) == pytest.approx(np.mean(jse), rel=0.10)
