import numpy as np
import pytest

from subvarid.errors import ConfigurationError
from subvarid.experiments import (
    BENCHMARK_DELTA,
    BENCHMARK_U_MAX,
    BENCHMARK_X0,
    BENCHMARK_Y_MAX,
    ExperimentConfig,
    canonical_model,
    convergence_slope,
    emit_csv,
    emit_summary,
    emit_trials_csv,
    load_config,
    lqr_gain,
    parse_curves_csv,
    run_campaign,
    run_trial,
    running_canonical,
    save_config,
    trial_rng,
    white_noise_baseline,
)


class TestBenchmarkSystem:
    def test_canonical_matches_published_values(self, canonical):
        model = canonical_model()
        assert np.array_equal(model.A, canonical.A)
        assert np.array_equal(model.B, canonical.B)
        assert np.array_equal(model.C, canonical.C)
        assert BENCHMARK_DELTA == 0.05
        assert BENCHMARK_Y_MAX == 100.0 and BENCHMARK_U_MAX == 10.0
        assert np.array_equal(BENCHMARK_X0, [0.0, 0.5, 0.3, 1.0])

    def test_raw_benchmark_is_open_loop_unstable(self):
        ev = np.abs(np.linalg.eigvals(canonical_model().A))
        assert ev.max() > 1.0

    def test_running_system_is_stable_with_same_markov_invariants(self):
        wrapped = running_canonical()
        assert np.abs(np.linalg.eigvals(wrapped.A)).max() < 1.0
        # regulator leaves B and C untouched
        assert np.array_equal(wrapped.B, canonical_model().B)
        assert np.array_equal(wrapped.C, canonical_model().C)

    def test_lqr_gain_stabilizes(self):
        model = canonical_model()
        K = lqr_gain(model)
        assert np.abs(np.linalg.eigvals(model.A - model.B @ K)).max() < 1.0


class TestTrialRng:
    def test_streams_are_distinct_and_reproducible(self):
        a1 = trial_rng(5, 3, 0).uniform(size=4)
        a2 = trial_rng(5, 3, 0).uniform(size=4)
        b = trial_rng(5, 3, 1).uniform(size=4)
        c = trial_rng(5, 4, 0).uniform(size=4)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)
        assert not np.array_equal(a1, c)


class TestConvergenceSlope:
    def test_exact_one_over_N(self):
        N = np.array([10, 20, 40, 80])
        assert convergence_slope(1.0 / N, N) == pytest.approx(-1.0, abs=1e-9)

    def test_exact_inverse_sqrt(self):
        N = np.array([10, 20, 40, 80])
        assert convergence_slope(1.0 / np.sqrt(N), N) == pytest.approx(-0.5, abs=1e-9)

    def test_constant_data(self):
        N = [10, 20, 40]
        assert convergence_slope([2.0, 2.0, 2.0], N) == pytest.approx(0.0, abs=1e-12)

    def test_nonpositive_rejected(self):
        with pytest.raises(ConfigurationError):
            convergence_slope([1.0, 0.0, 2.0], [1, 2, 3])

    def test_too_few_points(self):
        with pytest.raises(ConfigurationError):
            convergence_slope([1.0, 2.0], [1, 2])


@pytest.fixture(scope="module")
def small_campaign():
    config = ExperimentConfig(trials=3, N_schedule=(5, 10), rng_seed=99)
    designed = run_campaign(config)
    white = white_noise_baseline(config)
    return config, designed, white


class TestCampaign:
    def test_same_seed_identical_results(self, small_campaign):
        config, designed, _ = small_campaign
        again = run_campaign(config)
        for stat in designed.stats:
            for N in config.N_schedule:
                assert designed.stat(stat, N) == again.stat(stat, N)

    def test_statistics_recomputable_from_raw(self, small_campaign):
        config, designed, _ = small_campaign
        for N in config.N_schedule:
            errs = [r.errors[N] for r in designed.raw if not r.failed]
            assert designed.stat("err_mean", N) == pytest.approx(np.mean(errs))
            assert designed.stat("err_median", N) == pytest.approx(np.median(errs))

    def test_paired_trials_share_noise_streams(self):
        # trial index drives the plant noise, so the designed and white runs
        # of the same trial see identical realizations
        a = trial_rng(99, 1, 0).uniform(size=8)
        b = trial_rng(99, 1, 0).uniform(size=8)
        assert np.array_equal(a, b)

    def test_single_trial_zero_noise_near_exact(self):
        from subvarid.lti_core import NoiseSpec
        from subvarid.input_design import DesignConfig

        config = ExperimentConfig(
            trials=1,
            N_schedule=(5,),
            rng_seed=3,
            noise=NoiseSpec(delta=0.0),
            design=DesignConfig(delta=0.0, epsilon=1.0, alpha_M=np.inf),
        )
        res = run_trial(config, 0, "designed")
        assert res.errors[5] < 1e-9

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(input_mode="surprise")


class TestOutputFiles:
    def test_curves_csv_round_trip(self, small_campaign, tmp_path):
        config, designed, _ = small_campaign
        path = tmp_path / "curves.csv"
        emit_csv(designed, path)
        header = path.read_text().splitlines()[0]
        assert header == "N,mode,stat,value"
        parsed = parse_curves_csv(path)
        for stat in designed.stats:
            for N in config.N_schedule:
                got = parsed[stat][N]
                want = designed.stat(stat, N)
                assert got == want or (np.isnan(got) and np.isnan(want))

    def test_trials_csv_schema(self, small_campaign, tmp_path):
        _, designed, white = small_campaign
        path = tmp_path / "trials.csv"
        emit_trials_csv([designed, white], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "trial,N,mode,dG,J"
        assert len(lines) > 1

    def test_summary_mentions_ratio_and_missing_baseline(self, small_campaign):
        config, designed, white = small_campaign
        text = emit_summary(designed, white, ratio_N=10)
        assert "error ratio" in text
        assert "not implemented" in text

    def test_config_round_trip(self, tmp_path):
        config = ExperimentConfig(trials=7, N_schedule=(4, 8), rng_seed=11)
        path = tmp_path / "config.json"
        save_config(config, path)
        loaded = load_config(path)
        assert loaded.trials == 7
        assert tuple(loaded.N_schedule) == (4, 8)
        assert loaded.rng_seed == 11