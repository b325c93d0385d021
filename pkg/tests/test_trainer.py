import math

import numpy as np
import pytest

from otflow.data import DatasetSplit, sample_latent, toy_split
from otflow.objective import LOG_2PI
from otflow.ode import integrate_forward
from otflow.potential import ConfigurationError, init_params, zero_params
from otflow.trainer import (
    AdamState, Checkpoint, TrainConfig, TrainingDiverged, adam_step, make_checkpoint, train,
)


def quick_config(**kw):
    base = dict(m=8, nt_train=2, batch_size=64, max_iters=12, val_every=4, patience=50, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.nt_val == 2 * cfg.nt_train
        assert (cfg.alpha1, cfg.alpha2) == (1.0, 1.0)
        assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)

    def test_validation_grid_not_coarser(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(nt_train=8, nt_val=4)

    @pytest.mark.parametrize("field,value", [("m", 0), ("lr", 0.0), ("alpha2", -1.0),
                                             ("trace", "lanczos"), ("adam_beta1", 1.0)])
    def test_bad_values(self, field, value):
        with pytest.raises(ConfigurationError):
            TrainConfig(**{field: value})


class TestAdam:
    def test_zero_gradient_is_stationary(self):
        th = init_params(2, 4, rng=0)
        new = adam_step(th, zero_params(2, 4), AdamState.zeros(th.size), TrainConfig())
        np.testing.assert_array_equal(new.to_vector(), th.to_vector())

    def test_first_step_by_hand(self):
        th = init_params(2, 4, rng=0)
        g = init_params(2, 4, rng=1, small=0.5)
        cfg = TrainConfig(lr=0.01)
        new = adam_step(th, g, AdamState.zeros(th.size), cfg)
        gv = g.to_vector()
        # bias-corrected first step: m_hat = g, v_hat = g^2
        np.testing.assert_allclose(new.to_vector(), th.to_vector() - 0.01 * gv / (np.abs(gv) + 1e-8),
                                   rtol=1e-14, atol=1e-17)

    def test_second_step_by_hand(self):
        th = zero_params(1, 2)
        cfg = TrainConfig(lr=0.1)
        state = AdamState.zeros(th.size)
        g1, g2 = np.full(th.size, 2.0), np.full(th.size, -1.0)
        th1 = adam_step(th, th.from_vector(g1), state, cfg)
        th2 = adam_step(th1, th.from_vector(g2), state, cfg)
        m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
        v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
        step = m / (1 - 0.81) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        np.testing.assert_allclose(th2.to_vector(), th1.to_vector() - 0.1 * step, rtol=1e-13)


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        th = init_params(3, 5, M=2, rng=2, small=0.3)
        th.c = 1 / 3
        ck = Checkpoint(th, 17, math.inf, np.array([0.1, -2.0, 1e-300]), np.array([1.0, 3.3, 7.0]),
                        {"m": 5, "lr": 0.001})
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        ck.save(p1)
        Checkpoint.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()
        back = Checkpoint.load(p1)
        np.testing.assert_array_equal(back.theta.to_vector(), th.to_vector())
        assert back.best_val_C == math.inf and back.iteration == 17

    def test_version_checked(self):
        ck = Checkpoint(zero_params(2, 2), 0, 1.0, np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            Checkpoint.from_json(ck.to_json().replace('"version": 1', '"version": 99'))


class TestTrain:
    def test_deterministic(self):
        data = toy_split("eight-gaussians", 600, seed=1)
        for trace in ("exact", "hutchinson"):
            cfg = quick_config(trace=trace)
            th1, log1 = train(data, cfg)
            th2, log2 = train(data, cfg)
            np.testing.assert_array_equal(th1.to_vector(), th2.to_vector())
            np.testing.assert_array_equal(log1.column("total"), log2.column("total"))

    def test_log_and_validation_schedule(self):
        data = toy_split("two-moons", 600, seed=1)
        _, log = train(data, quick_config())
        assert len(log.rows) == 12
        assert [it for it, _ in log.validations()] == [4, 8, 12]
        assert log.stop_reason == "max_iters"
        tot, C, L, R = (log.column(k) for k in ("total", "C", "L", "R"))
        np.testing.assert_allclose(tot, C + L + R, rtol=1e-12)

    def test_patience_stops_early(self):
        data = toy_split("two-moons", 600, seed=1)
        _, log = train(data, quick_config(max_iters=400, val_every=1, patience=1, lr=0.5))
        assert log.stop_reason == "patience"
        assert len(log.rows) < 400

    def test_best_parameters_returned(self):
        data = toy_split("eight-gaussians", 600, seed=2)
        cfg = quick_config(max_iters=20)
        th, log = train(data, cfg)
        st, _ = integrate_forward(data.val, th, cfg.nt_val)
        C = np.mean(0.5 * np.sum(st.z ** 2, axis=1) - st.ell + LOG_2PI)
        assert C == pytest.approx(log.best_val_C, rel=1e-12)

    def test_checkpoint_written_for_best(self, tmp_path):
        data = toy_split("eight-gaussians", 600, seed=2)
        cfg = quick_config()
        path = tmp_path / "ck.json"
        th, log = train(data, cfg, checkpoint_path=path)
        ck = Checkpoint.load(path)
        np.testing.assert_array_equal(ck.theta.to_vector(), th.to_vector())
        assert ck.iteration == log.best_iter and ck.best_val_C == log.best_val_C
        np.testing.assert_array_equal(ck.mean, data.mean)
        assert make_checkpoint(th, data, cfg, log).to_json() == ck.to_json()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_last_good_checkpoint(self, tmp_path):
        data = toy_split("eight-gaussians", 600, seed=3)
        th0 = zero_params(2, 8)
        th0.b[:] = [1e308, -1e308, 0.0]
        path = tmp_path / "ck.json"
        with pytest.raises(TrainingDiverged) as info:
            train(data, quick_config(), theta0=th0, checkpoint_path=path)
        assert info.value.iteration == 1
        saved = Checkpoint.load(path)
        np.testing.assert_array_equal(saved.theta.to_vector(), th0.to_vector())

    def test_training_reduces_validation_C(self):
        data = toy_split("eight-gaussians", 4000, seed=0)
        cfg = TrainConfig(m=16, nt_train=4, batch_size=256, max_iters=150, val_every=10, seed=0)
        _, log = train(data, cfg)
        vals = dict(log.validations())
        assert log.best_val_C < vals[10] - 0.5

    def test_matched_densities_stay_near_identity(self):
        X = sample_latent(50_000, 2, seed=4)
        data = DatasetSplit(X[:40_000], X[40_000:45_000], X[45_000:], np.zeros(2), np.ones(2))
        cfg = TrainConfig(m=16, nt_train=4, batch_size=512, max_iters=60, val_every=10, seed=1)
        th, log = train(data, cfg)
        assert log.best_val_C == pytest.approx(1.0 + LOG_2PI, abs=0.05)
        st, _ = integrate_forward(data.test[:2000], th, 8)
        assert np.mean(np.linalg.norm(st.z - data.test[:2000], axis=1)) < 0.1
