"""Scenario engine tests: designs, common random numbers, summaries."""

import io
import math

import numpy as np
import pytest

from glmmlab.config import (
    ConfigError,
    FittedFamily,
    ScenarioConfig,
    apply_desk_preset,
    emit_scenario_config,
    parse_scenario_config,
)
from glmmlab.ranef import CenteredExponential, Normal, TukeyGH
from glmmlab.simlab import (
    ReplicationResult,
    gen_covariates,
    gen_dataset,
    run_scenario,
    run_slopes_scenario,
    scenario_model,
    summarize,
    write_replications_csv,
    write_summary_csv,
    write_tidy_csv,
)


def small_config(**overrides):
    base = dict(
        m=12,
        cluster_sizes=(2, 3),
        true_betas=(-1.0, 1.0, 0.5),
        sigma_b=1.0,
        true_family=Normal(),
        fitted_families=(FittedFamily("normal", Normal(), ()),),
        n_replications=2,
        base_seed=314,
        covariate_scheme="within_between",
        quad_points=15,
    )
    base.update(overrides)
    return ScenarioConfig(**base)


class TestCovariates:
    def test_within_between_endpoints(self):
        x = gen_covariates(8, 2, "within_between")
        np.testing.assert_array_equal(x[0, :, 1], [0.0, 1.0])

    def test_between_split_is_25_75(self):
        x = gen_covariates(200, 4, "within_between")
        assert x[:, 0, 0].sum() == 50
        np.testing.assert_array_equal(x[:50, 0, 0], 1.0)
        np.testing.assert_array_equal(x[50:, 0, 0], 0.0)

    def test_slopes_design_arms_and_times(self):
        x = gen_covariates(100, 6, "slopes_design")
        assert x[:, 0, 0].sum() == 50
        np.testing.assert_array_equal(x[0, :, 1], [0, 1, 2, 4, 6, 8])

    def test_scheme_size_mismatches(self):
        with pytest.raises(ConfigError):
            gen_covariates(10, 1, "within_between")
        with pytest.raises(ConfigError):
            gen_covariates(10, 5, "slopes_design")
        with pytest.raises(ConfigError):
            gen_covariates(10, 4, "nonsense")


class TestGenDataset:
    def test_zero_variance_gives_zero_effects(self):
        config = small_config(sigma_b=0.0)
        ds = gen_dataset(config, 3, 0)
        assert all(c.true_ranef == 0.0 for c in ds.clusters)

    def test_common_random_numbers_across_sizes(self):
        config = small_config()
        b_small = [c.true_ranef for c in gen_dataset(config, 2, 5).clusters]
        b_large = [c.true_ranef for c in gen_dataset(config, 40, 5).clusters]
        np.testing.assert_array_equal(b_small, b_large)

    def test_generation_ignores_fitted_families(self):
        one_arm = small_config()
        two_arm = small_config(
            fitted_families=(
                FittedFamily("normal", Normal(), ()),
                FittedFamily("exp", CenteredExponential(), ()),
            )
        )
        a = gen_dataset(one_arm, 3, 1)
        b = gen_dataset(two_arm, 3, 1)
        for ca, cb in zip(a.clusters, b.clusters):
            assert ca.y.tobytes() == cb.y.tobytes()
            assert ca.x.tobytes() == cb.x.tobytes()
            assert ca.true_ranef == cb.true_ranef

    def test_replications_differ(self):
        config = small_config()
        a = gen_dataset(config, 3, 0)
        b = gen_dataset(config, 3, 1)
        assert any(
            ca.true_ranef != cb.true_ranef for ca, cb in zip(a.clusters, b.clusters)
        )

    def test_pooled_moments_match_family(self):
        config = small_config(m=200, true_family=TukeyGH(0.5, 0.1))
        pooled = np.concatenate(
            [[c.true_ranef for c in gen_dataset(config, 2, rep).clusters]
             for rep in range(50)]
        )
        n = pooled.size
        assert abs(pooled.mean()) < 4 / math.sqrt(n)
        assert abs(pooled.var() - 1.0) < 0.1

    def test_bernoulli_outcomes_follow_logit(self):
        config = small_config(m=4000, sigma_b=0.0, true_betas=(-1.0, 0.0, 0.0))
        ds = gen_dataset(config, 2, 0)
        rate = np.concatenate([c.y for c in ds.clusters]).mean()
        assert rate == pytest.approx(1 / (1 + math.e), abs=0.02)


class TestRunScenario:
    def test_single_cell(self):
        config = small_config(cluster_sizes=(3,), n_replications=1)
        results = run_scenario(config, workers=1)
        assert len(results) == 1
        r = results[0]
        assert isinstance(r, ReplicationResult)
        assert r.cluster_size == 3
        assert r.family_label == "normal"
        assert r.seed_key == (314, 0)
        assert r.msep_mode is not None and r.msep_mean is not None

    def test_worker_count_does_not_change_results(self):
        config = small_config()
        serial = run_scenario(config, workers=1)
        parallel = run_scenario(config, workers=2)
        assert len(serial) == len(parallel)
        for a, b in zip(serial, parallel):
            assert (a.cluster_size, a.replication, a.family_label) == (
                b.cluster_size, b.replication, b.family_label,
            )
            assert a.fit.loglik == b.fit.loglik
            np.testing.assert_array_equal(a.fit.estimates.beta, b.fit.estimates.beta)

    def test_rerun_is_bitwise_identical(self):
        config = small_config()
        first = summarize(run_scenario(config, workers=1), config)
        second = summarize(run_scenario(config, workers=1), config)
        a, b = io.StringIO(), io.StringIO()
        for table, buf in ((first, a), (second, b)):
            for row in table.rows:
                buf.write(repr(row) + "\n")
        assert a.getvalue() == b.getvalue()

    def test_skip_free_shape_sizes(self):
        config = small_config(
            fitted_families=(
                FittedFamily("normal", Normal(), ()),
                FittedFamily("tukey(free)", TukeyGH(0.1, 0.05), ("g", "h")),
            ),
            cluster_sizes=(2,),
            n_replications=1,
            skip_free_shape_sizes=(2,),
        )
        results = run_scenario(config, workers=1)
        assert [r.family_label for r in results] == ["normal"]

    def test_slopes_scenario_validation(self):
        with pytest.raises(ConfigError):
            run_slopes_scenario(small_config(), workers=1)


class TestSummarize:
    def make_results(self, estimates, truth_config):
        from glmmlab.glmm import FitResult, ParamVector, parameter_names

        model = scenario_model(truth_config, truth_config.fitted_families[0])
        names = parameter_names(model)
        out = []
        for i, value in enumerate(estimates):
            params = ParamVector(
                beta=np.array([value, value, value]), log_sigma_b=value
            )
            out.append(
                ReplicationResult(
                    replication=i,
                    cluster_size=2,
                    family_label="normal",
                    fit=FitResult(
                        estimates=params,
                        std_errors=np.full(len(names), np.nan),
                        loglik=0.0,
                        converged=True,
                        n_iterations=1,
                        gradient_norm=0.0,
                        parameter_names=names,
                        model=model,
                    ),
                    msep_mode=0.25,
                    msep_mean=0.16,
                    base_seed=truth_config.base_seed,
                )
            )
        return out

    def test_exact_estimates_have_zero_bias_and_sd(self):
        config = small_config(true_betas=(2.0, 2.0, 2.0), sigma_b=math.exp(2.0))
        table = summarize(self.make_results([2.0, 2.0, 2.0], config), config)
        for p in ("beta0", "beta_between", "beta_within", "log_sigma_b"):
            row = table.lookup(2, "normal", p)
            assert row.bias == pytest.approx(0.0)
            assert row.sd == 0.0
            assert row.mse == pytest.approx(0.0)
            assert row.convergence_rate == 1.0

    def test_population_formulas_and_identity(self):
        config = small_config(true_betas=(2.0, 2.0, 2.0), sigma_b=math.exp(2.0))
        table = summarize(self.make_results([1.0, 3.0], config), config)
        row = table.lookup(2, "normal", "beta0")
        assert row.bias == pytest.approx(0.0)
        assert row.sd == pytest.approx(1.0)  # population SD of {1, 3}
        assert row.mse == pytest.approx(row.bias**2 + row.sd**2, abs=1e-8)
        assert row.median == pytest.approx(2.0)

    def test_msep_rows_present(self):
        config = small_config()
        table = summarize(self.make_results([1.0, 3.0], config), config)
        assert table.lookup(2, "normal", "msep_mode").bias == pytest.approx(0.25)
        assert table.lookup(2, "normal", "msep_mean").bias == pytest.approx(0.16)

    def test_convergent_only_filter(self):
        config = small_config()
        results = self.make_results([1.0, 3.0, 5.0], config)
        results[2].fit.converged = False
        full = summarize(results, config)
        conv = summarize(results, config, convergent_only=True)
        assert full.lookup(2, "normal", "beta0").median == 3.0
        assert conv.lookup(2, "normal", "beta0").median == 2.0
        assert conv.lookup(2, "normal", "beta0").convergence_rate == pytest.approx(2 / 3)


class TestCsvOutputs:
    def test_summary_and_tidy_files(self, tmp_path):
        config = small_config(cluster_sizes=(3,), n_replications=2)
        results = run_scenario(config, workers=1)
        table = summarize(results, config)
        summary = tmp_path / "summary.csv"
        tidy = tmp_path / "summary_tidy.csv"
        reps = tmp_path / "replications.csv"
        write_summary_csv(table, summary)
        write_tidy_csv(table, tidy)
        write_replications_csv(results, reps)

        header = summary.read_text().splitlines()[0]
        assert header == (
            "cluster_size,fitted_family,parameter,truth,bias,sd,mse,median,"
            "convergence_rate"
        )
        lines = reps.read_text().splitlines()
        assert len(lines) == 1 + len(results)
        assert "msep_mode" in lines[0] and "beta_within" in lines[0]
        tidy_lines = tidy.read_text().splitlines()
        assert tidy_lines[0] == "cluster_size,fitted_family,parameter,metric,value"


class TestConfigFiles:
    BUNDLED = [
        "configs/bias_study_tukey.cfg",
        "configs/bias_study_tukey_threearm.cfg",
        "configs/slopes_normal.cfg",
        "configs/slopes_mixture.cfg",
        "configs/slopes_mixture_smallvar.cfg",
        "configs/cohort_synthetic.cfg",
    ]

    @staticmethod
    def assert_equivalent(a, b):
        """Field-by-field equality, with float drift below 1e-12 allowed
        (fixed bivariate specs round-trip through exp/log)."""
        import dataclasses

        assert type(a) is type(b)
        if dataclasses.is_dataclass(a):
            for field in dataclasses.fields(a):
                TestConfigFiles.assert_equivalent(
                    getattr(a, field.name), getattr(b, field.name)
                )
        elif isinstance(a, float):
            assert a == pytest.approx(b, rel=1e-12, abs=1e-15)
        elif isinstance(a, tuple):
            assert len(a) == len(b)
            for x, y in zip(a, b):
                TestConfigFiles.assert_equivalent(x, y)
        else:
            assert a == b

    @pytest.mark.parametrize("path", BUNDLED)
    def test_bundled_configs_round_trip(self, path):
        import pathlib

        text = (pathlib.Path(__file__).resolve().parent.parent / path).read_text()
        config = parse_scenario_config(text)
        again = parse_scenario_config(emit_scenario_config(config))
        self.assert_equivalent(again, config)

    def test_desk_preset(self):
        import pathlib

        text = (
            pathlib.Path(__file__).resolve().parent.parent
            / "configs/bias_study_tukey.cfg"
        ).read_text()
        config = apply_desk_preset(parse_scenario_config(text))
        assert config.n_replications == 200
        assert config.cluster_sizes == (2, 10, 40)
        assert 2 in config.skip_free_shape_sizes

    def test_missing_key_message(self):
        with pytest.raises(ConfigError, match="missing key: m"):
            parse_scenario_config("")

    def test_unknown_key_has_line_number(self):
        text = "m = 10\nwhatever = 3\n"
        with pytest.raises(ConfigError, match="line 2: unknown key: whatever"):
            parse_scenario_config(text)

    def test_family_list_splits_inside_parens(self):
        text = (
            "m = 4\ncluster_sizes = 2\ntrue_betas = 0, 0, 0\nsigma_b = 1\n"
            "true_family = normal\n"
            "fitted_families = normal, tukey(g=0.5, h=0.1), exp\n"
            "n_replications = 1\nbase_seed = 1\ncovariate_scheme = within_between\n"
        )
        config = parse_scenario_config(text)
        assert [f.label for f in config.fitted_families] == [
            "normal", "tukey(g=0.5, h=0.1)", "exp",
        ]

    def test_scalar_truth_requires_sigma_b(self):
        text = (
            "m = 4\ncluster_sizes = 2\ntrue_betas = 0, 0, 0\n"
            "true_family = normal\nfitted_families = normal\n"
            "n_replications = 1\nbase_seed = 1\ncovariate_scheme = within_between\n"
        )
        with pytest.raises(ConfigError, match="missing key: sigma_b"):
            parse_scenario_config(text)
