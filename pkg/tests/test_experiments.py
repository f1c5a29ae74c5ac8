import json
import math

import numpy as np
import pytest

from holdreach.bounds import binomial_tail_inversion, wait_and_judge_epsilon
from holdreach.dynamics import HOLDOUT_STREAM, TRAIN_STREAM, builtin_model, sample_scenarios
from holdreach.experiments import (DEFAULT_SPLITS, SWEEP_HEADER, ConfigError, ExperimentConfig,
                                   TubeOptions, manifest, miscoverage_rate, read_sweep_csv,
                                   reference_terminal_states, run_coverage_study, run_derand_demo,
                                   run_split_sweep, run_tube_experiment, run_wait_and_judge,
                                   write_sweep_csv)
from holdreach.reachset import count_support_scenarios


def small_sweep(**kw):
    return ExperimentConfig(model="duffing", total=200, splits=[(100, 100), (190, 10)], **kw)


@pytest.fixture(scope="module")
def sweep_rows():
    return run_split_sweep(small_sweep())


class TestConfig:
    def test_defaults(self):
        c = ExperimentConfig()
        assert c.splits == list(DEFAULT_SPLITS) and c.m == 2 and c.beta == 1e-9
        assert all(N + M == 3000 for N, M in c.splits)
        assert ExperimentConfig(model="quadrotor").m == 3

    def test_degenerate_split_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(total=3000, splits=[(3000, 0)]).validate()

    def test_split_must_sum_to_total(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(total=3000, splits=[(1000, 1000)]).validate()

    @pytest.mark.parametrize("bad", [{"beta": 0.0}, {"beta": 1.0}, {"model": "pendulum"},
                                     {"gamma": 1.5}, {"m": 0}])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad).validate()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"modle": "duffing"})

    def test_round_trip(self, tmp_path):
        c = ExperimentConfig(model="linear2d", seed=4, tube=TubeOptions(lam=2.0))
        path = tmp_path / "c.json"
        path.write_text(json.dumps(c.to_dict()))
        back = ExperimentConfig.from_json(path)
        assert back == c and back.tube.lam == 2.0


class TestSweep:
    def test_row_self_consistency(self, sweep_rows):
        for r in sweep_rows:
            assert r.error is None
            assert r.epsilon == binomial_tail_inversion(r.k_hat, r.M, 1e-9)
            assert r.e_hat == r.k_hat / r.M
            assert r.vol > 0 and r.runtime_s > 0

    def test_ten_holdout_samples(self):
        r = run_split_sweep(ExperimentConfig(model="duffing", total=3000, splits=[(2990, 10)]))[0]
        assert r.k_hat == 0
        assert r.epsilon == pytest.approx(0.874, abs=1e-3)

    def test_deterministic(self, sweep_rows):
        again = run_split_sweep(small_sweep())
        assert [r.csv_values() for r in again] == [r.csv_values() for r in sweep_rows]

    def test_csv_round_trip(self, sweep_rows, tmp_path):
        path = write_sweep_csv(sweep_rows, tmp_path / "s.csv")
        assert path.read_text().splitlines()[0] == ",".join(SWEEP_HEADER)
        back = read_sweep_csv(path)
        assert [(r.N, r.M, r.k_hat, r.epsilon, r.vol) for r in back] == \
               [(r.N, r.M, r.k_hat, r.epsilon, r.vol) for r in sweep_rows]

    def test_streams_disjoint(self):
        sysm = builtin_model("duffing")
        tr = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, 20, 0, 1, seed=3,
                              stream=TRAIN_STREAM)
        ho = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, 20, 0, 1, seed=3,
                              stream=HOLDOUT_STREAM)
        assert not tr.keys & ho.keys

    def test_manifest_complete(self):
        c = small_sweep(seed=11)
        doc = manifest(c, "sweep")
        assert ExperimentConfig.from_dict(doc["config"]) == c
        assert {"version", "rng", "environment"} <= set(doc)
        json.dumps(doc)


class TestWaitAndJudge:
    def test_toy(self):
        row = run_wait_and_judge(ExperimentConfig(model="duffing", total=50))
        assert 0 <= row.support_count <= 50
        assert row.epsilon == wait_and_judge_epsilon(row.support_count, 50, 1e-9)

    def test_duplicated_fixture(self):
        X = np.random.default_rng(0).normal(size=(15, 2))
        D = np.vstack([X, X])
        s = count_support_scenarios(D, 2)
        assert s == 0
        N, beta = len(D), 1e-9
        assert wait_and_judge_epsilon(s, N, beta) == pytest.approx(
            -math.expm1(math.log(beta / N) / N), rel=1e-12)


class TestCoverage:
    def test_forced_full_epsilon(self):
        assert miscoverage_rate(np.full(10, 0.9), np.ones(10)) == 0.0

    def test_reference_matches_simulation(self):
        ref = reference_terminal_states("linear2d", 1000, 0, 2.0)
        sysm = builtin_model("linear2d")
        sim = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, 1000, 0, 2.0, seed=1)
        np.testing.assert_allclose(ref.mean(axis=0), sim.states.mean(axis=0), atol=0.01)

    def test_small_study(self):
        res = run_coverage_study("linear2d", trials=20, N=50, M=50, beta=0.5, seed=0, t1=1.0,
                                 reference_size=20_000)
        assert res.trials == 20
        assert np.all((res.true_violation >= 0) & (res.true_violation <= 1))
        for k, e in zip(res.k_hat, res.epsilon):
            assert e == binomial_tail_inversion(int(k), 50, 0.5)
        assert res.miscoverage == np.mean(res.true_violation > res.epsilon)

    def test_deterministic(self):
        kw = dict(trials=5, N=30, M=30, beta=0.1, seed=3, t1=1.0, reference_size=5000)
        a, b = run_coverage_study(**kw), run_coverage_study(**kw)
        np.testing.assert_array_equal(a.true_violation, b.true_violation)


class TestTube:
    def test_small_run(self):
        c = ExperimentConfig(model="linear2d", tube=TubeOptions(n_instants=6, n_train=60,
                                                                 n_holdout=60))
        res = run_tube_experiment(c)
        r = res.row
        assert r.epsilon == binomial_tail_inversion(r.k_hat, 60, 1e-9)
        assert res.instant_violations.shape == (6,)
        assert res.instant_violations.max() <= r.k_hat <= res.instant_violations.sum()

    def test_ten_holdout_trajectories(self):
        r = run_tube_experiment(ExperimentConfig(model="linear2d",
                                                 tube=TubeOptions(n_holdout=10))).row
        assert r.k_hat == 0
        assert r.epsilon == pytest.approx(0.874, abs=1e-3)

    def test_large_lam_flattens_widths(self):
        def widths(lam):
            c = ExperimentConfig(model="linear2d", tube=TubeOptions(n_instants=11, n_train=300,
                                                                     n_holdout=10, lam=lam))
            return run_tube_experiment(c).tube.widths
        assert np.var(widths(1e3)) < np.var(widths(0.0))


class TestDerand:
    def test_rows(self):
        rows = run_derand_demo([1, 20], [0.01], n=10_000)
        assert rows[0]["delta_star"] == pytest.approx(0.01, rel=1e-12)
        assert rows[1]["delta_star"] == pytest.approx(0.7943282347242815, rel=1e-12)
        assert rows[0]["exact_p"] == pytest.approx(0.01, rel=1e-12)
