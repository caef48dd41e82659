"""Parameter vectors, transforms, data containers, random streams and model validation."""
import numpy as np
import pandas as pd
import pytest

from pomp_core import (CovariateTable, ModelValidationError, ParameterVector, ParamTransform, RngStream,
                       TimeSeriesData, as_stream, check_dimensions, inverse_transform_params, transform_params,
                       validate_model)
from utils.table_io import SchemaError, read_table, write_table


class TestParameterVector:
    def test_named_access(self):
        theta = ParameterVector.from_dict({"a": 1.0, "b": 2.5, "x0": -1.0}, ivps=("x0",))
        assert theta.p == 3
        assert theta["b"] == 2.5
        assert theta.as_dict() == {"a": 1.0, "b": 2.5, "x0": -1.0}
        np.testing.assert_array_equal(theta.ivp_mask, [False, False, True])

    def test_with_values_keeps_names_and_flags(self):
        theta = ParameterVector.from_dict({"a": 1.0, "x0": 0.0}, ivps=("x0",))
        moved = theta.with_values([3.0, 4.0])
        assert moved.names == theta.names
        np.testing.assert_array_equal(moved.ivp_mask, theta.ivp_mask)
        np.testing.assert_array_equal(moved.values, [3.0, 4.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="Length mismatch"):
            ParameterVector(np.array([1.0, 2.0]), ("a",))

    def test_rejects_duplicate_names(self):
        with pytest.raises(ValueError, match="Duplicate"):
            ParameterVector(np.array([1.0, 2.0]), ("a", "a"))

    def test_rejects_non_finite_value_naming_coordinate(self):
        with pytest.raises(ValueError, match="rate"):
            ParameterVector(np.array([1.0, np.nan]), ("level", "rate"))

    def test_values_are_read_only(self):
        theta = ParameterVector(np.array([1.0]), ("a",))
        with pytest.raises(ValueError):
            theta.values[0] = 2.0


class TestParamTransform:
    def test_log_and_logit_scales(self):
        t = ParamTransform.from_mapping(("rate", "frac", "shift"), {"rate": "log", "frac": ("logit", 0.0, 2.0)})
        z = t.forward(np.array([np.e, 1.0, -3.0]))
        np.testing.assert_allclose(z, [1.0, 0.0, -3.0], atol=1e-15)
        np.testing.assert_allclose(t.inverse(z), [np.e, 1.0, -3.0], rtol=1e-14)

    def test_vectorized_over_particles(self):
        t = ParamTransform.from_mapping(("rate", "frac"), {"rate": "log", "frac": ("logit", 0.0, 1.0)})
        rng = np.random.default_rng(42)
        x = np.column_stack([rng.uniform(0.1, 5.0, 50), rng.uniform(0.05, 0.95, 50)])
        np.testing.assert_allclose(t.inverse(t.forward(x)), x, rtol=1e-12)

    def test_log_domain_error_names_coordinate(self):
        t = ParamTransform.from_mapping(("rate",), {"rate": "log"})
        with pytest.raises(ValueError, match="rate"):
            t.forward(np.array([0.0]))

    def test_logit_domain_error_at_bound(self):
        t = ParamTransform.from_mapping(("frac",), {"frac": ("logit", 0.0, 1.0)})
        with pytest.raises(ValueError, match="frac"):
            t.forward(np.array([1.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="Unknown transform"):
            ParamTransform(("a",), ("sqrt",))

    def test_parameter_vector_maps_check_names(self):
        t = ParamTransform.from_mapping(("rate",), {"rate": "log"})
        theta = ParameterVector(np.array([2.0]), ("rate",))
        est = transform_params(theta, t)
        np.testing.assert_allclose(est.values, [np.log(2.0)])
        np.testing.assert_allclose(inverse_transform_params(est, t).values, [2.0])
        with pytest.raises(ValueError, match="do not match"):
            transform_params(ParameterVector(np.array([2.0]), ("other",)), t)


class TestTimeSeriesData:
    def test_intervals_start_at_t0(self):
        data = TimeSeriesData(np.array([1.0, 2.0, 4.0]), np.zeros((3, 2)), t0=0.5)
        assert data.N == 3 and data.d_y == 2
        assert data.interval(1) == (0.5, 1.0)
        assert data.interval(3) == (2.0, 4.0)

    def test_rejects_non_increasing_times(self):
        with pytest.raises(ValueError, match="increasing"):
            TimeSeriesData(np.array([1.0, 1.0]), np.zeros((2, 1)))

    def test_rejects_t0_after_first_time(self):
        with pytest.raises(ValueError, match="t0"):
            TimeSeriesData(np.array([1.0, 2.0]), np.zeros((2, 1)), t0=1.0)

    def test_missing_row_reports_index(self):
        y = np.zeros((4, 1))
        y[2, 0] = np.nan
        with pytest.raises(ValueError, match="n=3"):
            TimeSeriesData(np.arange(1.0, 5.0), y)

    def test_empty_series(self):
        data = TimeSeriesData(np.empty(0), np.empty((0, 2)))
        assert data.N == 0 and data.d_y == 2

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(42)
        data = TimeSeriesData(np.arange(1.0, 11.0), rng.normal(size=(10, 2)), t0=0.25)
        path = data.to_csv(tmp_path / "data.csv", {"model": "toy"})
        loaded = TimeSeriesData.from_csv(path)
        np.testing.assert_array_equal(loaded.times, data.times)
        np.testing.assert_array_equal(loaded.observations, data.observations)
        assert loaded.t0 == 0.25

    def test_csv_with_wrong_schema(self, tmp_path):
        path = write_table(pd.DataFrame({"time": [1.0], "y_1": [0.0]}), tmp_path / "x.csv", "aifkit.result/1")
        with pytest.raises(SchemaError):
            TimeSeriesData.from_csv(path)


class TestCovariateTable:
    def test_piecewise_constant_lookup(self):
        cov = CovariateTable(np.array([0.0, 1.0, 2.0]), np.array([10.0, 20.0, 30.0]), ("rainfall",))
        assert cov.column("rainfall", 0.0) == 10.0
        assert cov.column("rainfall", 1.5) == 20.0
        assert cov.column("rainfall", 7.0) == 30.0
        assert cov.column("rainfall", -1.0) == 10.0

    def test_plain_csv_without_header_line(self, tmp_path):
        path = tmp_path / "rain.csv"
        path.write_text("month,rainfall\n0,5.5\n1,7.25\n")
        cov = CovariateTable.from_csv(path)
        assert cov.names == ("rainfall",)
        np.testing.assert_array_equal(cov.values[:, 0], [5.5, 7.25])

    def test_round_trip(self, tmp_path):
        cov = CovariateTable(np.arange(3.0), np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), ("rainfall", "pop"))
        loaded = CovariateTable.from_csv(cov.to_csv(tmp_path / "cov.csv"))
        assert loaded.names == cov.names
        np.testing.assert_array_equal(loaded.values, cov.values)
        _, meta = read_table(tmp_path / "cov.csv")
        assert meta["schema"] == "aifkit.covariates/1"


class TestRngStream:
    def test_identical_identifiers_reproduce_draws(self):
        a = RngStream(7, 1, (3,)).generator().normal(size=5)
        b = RngStream(7, 1, (3,)).generator().normal(size=5)
        np.testing.assert_array_equal(a, b)

    def test_children_are_distinct(self):
        root = RngStream(7, 1)
        a = root.child(1).generator().normal(size=5)
        b = root.child(2).generator().normal(size=5)
        c = RngStream(7, 2).child(1).generator().normal(size=5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_child_extends_path(self):
        assert RngStream(1, 2, (3,)).child(4, 5) == RngStream(1, 2, (3, 4, 5))

    def test_seed_required(self):
        with pytest.raises(ValueError):
            as_stream(None)
        with pytest.raises(ValueError):
            RngStream(-1)


class TestValidateModel:
    def test_ok_report_and_stable_digest(self, scalar_model, scalar_data):
        m = scalar_model(process_sd=0.5)
        data = scalar_data([0.1, 0.4, -0.2, 0.3])
        theta = m.params([0.5])
        first = validate_model(m, theta, data, seed=3)
        second = validate_model(m, theta, data, seed=3)
        assert first.status == "ok"
        assert first.n_evaluations == 4
        assert first.digest == second.digest
        assert "status: ok" in first.to_text()

    def test_nan_density_reports_time(self, scalar_model, scalar_data):
        m = scalar_model(bad_time=3.0, bad_value=np.nan)
        with pytest.raises(ModelValidationError) as info:
            validate_model(m, m.params([0.5]), scalar_data([0.0] * 5), seed=1)
        assert info.value.n == 3

    def test_neg_inf_density_is_reported_not_raised(self, scalar_model, scalar_data):
        m = scalar_model(bad_time=2.0)
        report = validate_model(m, m.params([0.5]), scalar_data([0.0] * 3), seed=1)
        assert report.status == "neg-inf"
        assert report.neg_inf_times == (2,)

    def test_dimension_mismatch(self, scalar_model):
        m = scalar_model()
        data = TimeSeriesData(np.array([1.0]), np.zeros((1, 2)))
        with pytest.raises(ModelValidationError, match="d_y"):
            check_dimensions(m, m.params([0.5]), data)
        with pytest.raises(ModelValidationError, match="names"):
            check_dimensions(m, ParameterVector(np.array([0.5]), ("beta",)), data)
