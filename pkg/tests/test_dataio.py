"""CSV interchange tests."""

import io

import numpy as np
import pytest

from glmmlab.dataio import (
    format_model_spec,
    parse_model_spec,
    read_dataset_csv,
    read_fit_csv,
    write_dataset_csv,
    write_fit_csv,
    write_fit_csv_path,
    write_predictions_csv,
)
from glmmlab.glmm import (
    BERNOULLI_LOGIT,
    GAUSSIAN_IDENTITY,
    Cluster,
    DataError,
    Dataset,
    FitResult,
    ModelSpec,
    ParamVector,
    pack_params,
    parameter_names,
)
from glmmlab.predict import PredictionSet
from glmmlab.ranef import Normal, TukeyGH


class TestModelSpecs:
    def test_parse_forms(self):
        assert parse_model_spec("bernoulli") == (BERNOULLI_LOGIT, None)
        assert parse_model_spec("Gaussian") == (GAUSSIAN_IDENTITY, None)
        assert parse_model_spec("bernoulli:slope=t") == (BERNOULLI_LOGIT, "t")

    def test_parse_errors(self):
        with pytest.raises(DataError):
            parse_model_spec("poisson")
        with pytest.raises(DataError):
            parse_model_spec("bernoulli:ranef=t")

    def test_format_round_trip(self):
        model = ModelSpec(BERNOULLI_LOGIT, ("z", "t"), Normal())
        assert format_model_spec(model) == "bernoulli"


class TestDatasetCsv:
    def make_dataset(self):
        rng = np.random.default_rng(0)
        clusters = []
        for i in range(5):
            n = 3
            x = rng.standard_normal((n, 2))
            y = (rng.random(n) < 0.5).astype(float)
            clusters.append(Cluster(i, y, x, true_ranef=float(rng.normal())))
        return Dataset(tuple(clusters), ("a", "b"))

    def test_round_trip(self, tmp_path):
        ds = self.make_dataset()
        path = tmp_path / "data.csv"
        write_dataset_csv(ds, path, include_truth=True)
        back = read_dataset_csv(path)
        assert back.covariate_names == ("a", "b")
        assert len(back) == len(ds)
        for orig, loaded in zip(ds.clusters, back.clusters):
            np.testing.assert_array_equal(orig.y, loaded.y)
            np.testing.assert_array_equal(orig.x, loaded.x)
            assert loaded.true_ranef == pytest.approx(orig.true_ranef)

    def test_header_validation(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,y,x1\n1,0,0.5\n")
        with pytest.raises(DataError, match="cluster,y"):
            read_dataset_csv(path)

    def test_field_count_and_numeric_errors(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("cluster,y,x1\n1,0\n")
        with pytest.raises(DataError, match="bad.csv:2"):
            read_dataset_csv(path)
        path.write_text("cluster,y,x1\n1,zero,0.5\n")
        with pytest.raises(DataError, match="non-numeric"):
            read_dataset_csv(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError, match="empty"):
            read_dataset_csv(path)


class TestFitCsv:
    def make_fit(self):
        model = ModelSpec(BERNOULLI_LOGIT, ("z", "t"), TukeyGH(0.5, 0.1))
        params = ParamVector(
            beta=np.array([-2.5, 2.0, 1.0]), log_sigma_b=0.125
        )
        names = parameter_names(model)
        return FitResult(
            estimates=params,
            std_errors=np.array([0.1, 0.2, 0.3, np.nan]),
            loglik=-123.456,
            converged=True,
            n_iterations=17,
            gradient_norm=3.2e-5,
            parameter_names=names,
            model=model,
        )

    def test_stream_format(self):
        buffer = io.StringIO()
        write_fit_csv(self.make_fit(), buffer)
        lines = buffer.getvalue().splitlines()
        assert lines[0] == "parameter,estimate,std_error"
        assert lines[1].startswith("beta0,-2.5,0.1")
        assert lines[4] == "log_sigma_b,0.125,"  # nan SE leaves the cell empty
        assert lines[-1].startswith("{")

    def test_round_trip(self, tmp_path):
        fit = self.make_fit()
        path = tmp_path / "fit.csv"
        write_fit_csv_path(fit, path)
        back = read_fit_csv(path)
        assert back.parameter_names == fit.parameter_names
        np.testing.assert_allclose(
            pack_params(back.estimates, back.model),
            pack_params(fit.estimates, fit.model),
        )
        assert back.loglik == fit.loglik
        assert back.converged == fit.converged
        assert back.n_iterations == fit.n_iterations
        assert back.model.ranef_family == fit.model.ranef_family

    def test_missing_status_line(self, tmp_path):
        path = tmp_path / "fit.csv"
        path.write_text("parameter,estimate,std_error\nbeta0,1.0,\n")
        with pytest.raises(DataError, match="status"):
            read_fit_csv(path)


class TestPredictionsCsv:
    def test_scalar_with_truth(self, tmp_path):
        preds = PredictionSet(
            cluster_ids=(0, 1),
            values=np.array([0.5, -0.25]),
            method="mode",
            fit=None,
            true_values=np.array([0.4, -0.2]),
        )
        path = tmp_path / "pred.csv"
        write_predictions_csv(preds, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "cluster,b_hat,b_true"
        assert lines[1] == "0,0.5,0.4"

    def test_paired_columns(self, tmp_path):
        preds = PredictionSet(
            cluster_ids=(0,),
            values=np.array([[0.5, -0.25]]),
            method="mean",
            fit=None,
        )
        path = tmp_path / "pred.csv"
        write_predictions_csv(preds, path)
        assert path.read_text().splitlines()[0] == "cluster,b0_hat,bw_hat"
