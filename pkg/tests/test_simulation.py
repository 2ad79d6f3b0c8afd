import numpy as np
import pytest

from clustertrial.errors import TooManyFailures
from clustertrial.simulation import (
    CSV_COLUMNS,
    MetricsRow,
    ScenarioConfig,
    generate_cluster,
    generate_dataset,
    metrics_csv,
    observed_sizes,
    replicate_rng,
    run_monte_carlo,
    true_estimands,
)


@pytest.mark.parametrize("scenario,allowed", [(1, {9, 10}), (2, {2, 3, 6, 7, 10, 15})])
def test_observed_size_support(scenario, allowed):
    data = generate_dataset(ScenarioConfig("continuous", scenario, m=200), 0)
    assert set(data.M.tolist()) <= allowed


def test_cluster_dependent_sizes():
    assert observed_sizes(True, 50, 1) == (15, 6)
    assert observed_sizes(True, 10, 0) == (2, 3)
    assert observed_sizes(True, 10, 1) == (7, 3)


def test_random_sizes_equal_in_both_arms():
    m1, m0 = observed_sizes(False, 50, 1, np.random.default_rng(0))
    assert m1 == m0 and m1 in (9, 10)


def test_potential_cluster_invariants():
    rng = replicate_rng(1, 0)
    for _ in range(20):
        pot, rec = generate_cluster(ScenarioConfig("binary", 2), rng)
        assert pot.S1.sum() == pot.M1 <= pot.N
        assert pot.S0.sum() == pot.M0 <= pot.N
        assert pot.N in (10, 50)
        assert rec.observed_size == (pot.M1 if rec.treatment == 1 else pot.M0)
        assert set(np.unique(rec.outcomes)) <= {0.0, 1.0}


def test_continuous_truth_from_size_distribution():
    sizes = np.array([10.0, 50.0])
    # the effect for a cluster of size N is N/5 on average
    delta_c = np.mean(sizes / 5)
    delta_i = np.mean(sizes * sizes / 5) / np.mean(sizes)
    assert true_estimands("continuous") == pytest.approx((delta_c, delta_i), abs=1e-12)


def test_datasets_reproducible_by_replicate():
    config = ScenarioConfig("continuous", 3)
    assert generate_dataset(config, 4).equals(generate_dataset(config, 4))
    assert not generate_dataset(config, 4).equals(generate_dataset(config, 5))


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(replicates=0)
    with pytest.raises(ValueError):
        ScenarioConfig(scenario=5)
    with pytest.raises(ValueError):
        ScenarioConfig(experiment="count")
    assert ScenarioConfig(scenario=2).m == 30
    assert ScenarioConfig(scenario=4).m == 100


def test_metrics_row_validation():
    with pytest.raises(ValueError):
        MetricsRow("gee-g", "cluster", 0.0, 1.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        MetricsRow("gee-g", "cluster", 0.0, -1.0, 1.0, 0.5)


def test_single_replicate_row():
    config = ScenarioConfig("continuous", 1, replicates=1)
    rows = run_monte_carlo(config, ("unadjusted",), ("cluster",))
    (row,) = rows
    assert row.ese == 0.0
    assert row.n_ok == 1 and row.n_failed == 0
    assert row.cp in (0.0, 1.0)


def test_worker_count_does_not_change_results():
    config = ScenarioConfig("continuous", 1, replicates=6)
    est = ("unadjusted", "gee-g")
    one = run_monte_carlo(config, est, workers=1)
    two = run_monte_carlo(config, est, workers=2)
    assert metrics_csv(one, config) == metrics_csv(two, config)


def test_csv_layout():
    config = ScenarioConfig("continuous", 1, replicates=3)
    text = metrics_csv(run_monte_carlo(config, ("unadjusted", "lmm-g")), config)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 2 * 2
    fields = lines[1].split(",")
    assert fields[0] == "continuous-scenario1-m30"
    assert all(len(f.split(".")[1]) == 6 for f in fields[3:7])


def test_failure_budget(monkeypatch):
    from clustertrial import estimators
    from clustertrial.errors import NonConvergence

    def broken(*args, **kwargs):
        raise NonConvergence("forced", stage="gee")

    monkeypatch.setattr(estimators, "estimate_gee", broken)
    config = ScenarioConfig("continuous", 1, replicates=2)
    with pytest.raises(TooManyFailures) as exc:
        run_monte_carlo(config, ("gee-g",), ("cluster",))
    assert exc.value.rows[0].n_failed == 2
