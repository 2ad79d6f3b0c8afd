import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clustertrial.data import (
    ColumnSchema,
    EstimandSpec,
    Level,
    Measure,
    Population,
    apply_measure,
    measure_gradient,
    t_confidence_interval,
    validate_dataset,
)
from clustertrial.errors import (
    DomainError,
    EmptyArm,
    MissingColumn,
    MissingValue,
    NonConstantWithinCluster,
    ValidationError,
)

from conftest import make_dataset


def raw_trial():
    return {
        "cluster_id": ["a", "a", "a", "b", "b", "c", "d", "d"],
        "treatment": [1, 1, 1, 0, 0, 1, 0, 0],
        "outcome": [1.0, 2.0, 3.0, 0.0, 1.0, 5.0, 2.0, 2.0],
        "source_size": [5, 5, 5, 2, 2, 4, 3, 3],
    }


def test_rows_grouped_into_clusters():
    data = validate_dataset(raw_trial())
    first = data.clusters[0]
    assert first.cluster_id == "a"
    assert (first.observed_size, first.source_size, first.treatment) == (3, 5, 1)
    np.testing.assert_allclose(data.ybar, [2.0, 0.5, 5.0, 2.0])


def test_clusters_keep_first_appearance_order():
    raw = raw_trial()
    order = [5, 0, 3, 1, 6, 2, 4, 7]
    shuffled = {k: [v[i] for i in order] for k, v in raw.items()}
    data = validate_dataset(shuffled)
    assert data.cluster_ids == ("c", "a", "b", "d")
    np.testing.assert_allclose(data.ybar, [5.0, 2.0, 0.5, 2.0])


def test_treatment_varying_within_cluster_rejected():
    raw = raw_trial()
    raw["treatment"][1] = 0
    with pytest.raises(NonConstantWithinCluster) as exc:
        validate_dataset(raw)
    assert exc.value.line == 3
    assert exc.value.column == "treatment"


def test_enrolled_mode_sets_source_size_to_observed():
    raw = raw_trial()
    del raw["source_size"]
    data = validate_dataset(raw, population=Population.ENROLLED)
    np.testing.assert_array_equal(data.N, data.M)
    assert data.N[0] == 3


def test_unknown_mode_has_no_source_size():
    raw = raw_trial()
    del raw["source_size"]
    data = validate_dataset(raw, population=Population.UNKNOWN)
    assert data.N is None


def test_missing_column_named():
    raw = raw_trial()
    del raw["outcome"]
    with pytest.raises(MissingColumn) as exc:
        validate_dataset(raw)
    assert exc.value.column == "outcome"


def test_missing_value_reports_line():
    raw = raw_trial()
    raw["outcome"][4] = ""
    with pytest.raises(MissingValue) as exc:
        validate_dataset(raw)
    assert exc.value.line == 6


def test_source_size_below_observed_rejected():
    raw = raw_trial()
    raw["source_size"][:3] = [2, 2, 2]
    with pytest.raises(ValidationError):
        validate_dataset(raw)


def test_single_cluster_arm_rejected():
    raw = raw_trial()
    raw["treatment"][5] = 0
    with pytest.raises(EmptyArm):
        validate_dataset(raw)


def test_covariate_columns_and_round_trip():
    raw = raw_trial()
    raw["C1"] = [1, 1, 1, 2, 2, 3, 4, 4]
    raw["X1"] = list(range(8))
    schema = ColumnSchema(cluster_covariates=("C1",), indiv_covariates=("X1",))
    data = validate_dataset(raw, schema)
    again = validate_dataset(data.to_rows(), schema)
    assert data.equals(again)
    np.testing.assert_allclose(data.C[:, 0], [1, 2, 3, 4])


def test_cluster_covariate_must_be_constant():
    raw = raw_trial()
    raw["C1"] = [1, 1, 2, 2, 2, 3, 4, 4]
    with pytest.raises(NonConstantWithinCluster):
        validate_dataset(raw, ColumnSchema(cluster_covariates=("C1",)))


def test_individual_estimand_needs_source_size():
    with pytest.raises(DomainError):
        EstimandSpec(level=Level.INDIVIDUAL, population=Population.UNKNOWN)


def test_subset_keeps_cluster_rows():
    data = make_dataset([1.0, 2.0, 3.0, 4.0, 5.0], [1, 0, 1, 0, 1], [2, 3, 1, 2, 2], spread=1.0)
    sub = data.subset([0, 1, 3, 4])
    assert sub.m == 4
    np.testing.assert_allclose(sub.ybar, [1.0, 2.0, 4.0, 5.0])


# ----------------------------------------------------------- measures

@pytest.mark.parametrize("measure,mu,expected", [
    (Measure.DIFFERENCE, (6.0, 0.0), 6.0),
    (Measure.RATIO, (0.6, 0.3), 2.0),
    (Measure.ODDS_RATIO, (0.5, 0.5), 1.0),
])
def test_measure_values(measure, mu, expected):
    assert apply_measure(measure, *mu) == pytest.approx(expected)


def test_measure_gradients():
    assert measure_gradient(Measure.DIFFERENCE, 3.0, -1.0) == (1.0, -1.0)
    np.testing.assert_allclose(measure_gradient(Measure.RATIO, 0.6, 0.3), (10 / 3, -20 / 3))
    np.testing.assert_allclose(measure_gradient(Measure.ODDS_RATIO, 0.5, 0.5), (4.0, -4.0))


def test_measure_domain_errors():
    with pytest.raises(DomainError):
        apply_measure(Measure.RATIO, 1.0, 0.0)
    with pytest.raises(DomainError):
        apply_measure(Measure.ODDS_RATIO, 1.0, 0.5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.sampled_from(list(Measure)))
def test_gradient_matches_finite_differences(mu1, mu0, measure):
    h = 1e-6
    g1 = (apply_measure(measure, mu1 + h, mu0) - apply_measure(measure, mu1 - h, mu0)) / (2 * h)
    g0 = (apply_measure(measure, mu1, mu0 + h) - apply_measure(measure, mu1, mu0 - h)) / (2 * h)
    np.testing.assert_allclose(measure_gradient(measure, mu1, mu0), (g1, g0), rtol=1e-5, atol=1e-6)


# ------------------------------------------------------- t intervals

def test_interval_normal_limit():
    lo, hi = t_confidence_interval(0.0, 1.0, 10 ** 7)
    assert lo == pytest.approx(-1.96, abs=1e-2)
    assert hi == pytest.approx(1.96, abs=1e-2)


def test_interval_zero_variance():
    assert t_confidence_interval(5.0, 0.0, 10) == (5.0, 5.0)


def test_interval_ten_dof():
    lo, hi = t_confidence_interval(0.0, 1.0, 10)
    assert hi == pytest.approx(2.228, abs=1e-3)
    assert lo == pytest.approx(-2.228, abs=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100), st.floats(0.0, 50.0), st.integers(1, 500))
def test_interval_symmetric_and_ordered(delta, var, dof):
    lo, hi = t_confidence_interval(delta, var, dof)
    assert lo <= delta <= hi
    assert (hi - delta) == pytest.approx(delta - lo, rel=1e-9, abs=1e-9)
