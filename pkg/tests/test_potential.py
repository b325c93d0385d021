import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import a_only_model, fd_gradient, fd_hessian_trace, linear_model, potential_loop, random_model, rel_err
from otflow.potential import (
    ConfigurationError, ModelParams, d2sigma, default_rank, dsigma, exact_trace,
    hessian_quadratic_form, hutchinson_trace, init_params, potential_forward,
    potential_gradient, sigma, zero_params,
)

# values produced by the independent oracles for a fixed seeded model
FROZEN_S = np.array([0.3, -0.7, 0.25])
FROZEN_PHI = -10.687888263771296
FROZEN_GRAD = np.array([0.50438085, 0.7683033, -0.28810968])
FROZEN_TRACE = -1.35030512533


def frozen_model():
    return random_model(2, 16, 2, np.random.default_rng(123))


class TestActivation:
    def test_values_at_zero(self):
        assert sigma(0.0) == pytest.approx(np.log(2.0), abs=1e-15)
        assert dsigma(0.0) == 0.0
        assert d2sigma(0.0) == 1.0

    def test_large_arguments_do_not_overflow(self):
        assert sigma(1000.0) == 1000.0
        assert sigma(-1000.0) == 1000.0
        assert np.isfinite(sigma(np.array([710.0, -710.0, 1e300]))).all()

    def test_derivative_matches_finite_difference(self):
        x, eps = 0.7, 1e-5
        assert abs((sigma(x + eps) - sigma(x - eps)) / (2 * eps) - dsigma(x)) < 1e-8
        assert abs((dsigma(x + eps) - dsigma(x - eps)) / (2 * eps) - d2sigma(x)) < 1e-8

    @given(st.floats(-50, 50))
    def test_matches_log_cosh_form(self, x):
        assert sigma(x) == pytest.approx(np.logaddexp(x, -x), rel=1e-14, abs=1e-14)


class TestParams:
    def test_default_rank(self):
        assert default_rank(2) == 2
        assert default_rank(43) == 10
        assert init_params(43, 8).r == 10

    def test_shapes_validated(self):
        th = init_params(3, 8, M=2)
        arrs = th.arrays()
        arrs["w"] = np.zeros(7)
        with pytest.raises(ConfigurationError):
            ModelParams.from_arrays(arrs)
        with pytest.raises(ConfigurationError):
            init_params(3, 8, r=5)

    def test_vector_round_trip(self):
        th = init_params(3, 8, M=2, rng=0)
        back = th.from_vector(th.to_vector())
        for k, v in th.arrays().items():
            np.testing.assert_array_equal(back.arrays()[k], v)
        with pytest.raises(ConfigurationError):
            th.from_vector(th.to_vector()[:-1])

    def test_init_is_near_identity(self):
        th = init_params(2, 16, rng=1)
        assert np.max(np.abs(th.w)) <= 1e-3 and np.max(np.abs(th.A)) <= 1e-3
        assert th.c == 0.0 and not th.resnet.b0.any()
        lim = np.sqrt(6.0 / (3 + 16))
        assert np.max(np.abs(th.resnet.K0)) <= lim


class TestForward:
    def test_constant_potential(self):
        th = zero_params(3, 8)
        th.c = 5.0
        assert potential_forward(np.array([1.0, -2.0, 3.0, 0.5]), th) == 5.0

    def test_linear_case(self):
        assert potential_forward(np.array([2.0, 1.0]), linear_model([3.0, 0.5])) == pytest.approx(6.5)

    def test_frozen_value(self):
        assert potential_forward(FROZEN_S, frozen_model()) == pytest.approx(FROZEN_PHI, rel=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        th = random_model(2, 16, 2, rng)
        S = rng.standard_normal((20, 3))
        batch = potential_forward(S, th)
        for s, v in zip(S, batch):
            assert v == pytest.approx(potential_loop(s, th), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            potential_forward(np.zeros(5), init_params(2, 4))


class TestGradient:
    def test_linear_case(self):
        g, _ = potential_gradient(np.array([0.4, 0.9]), linear_model([3.0, 0.5]))
        np.testing.assert_allclose(g, [3.0, 0.5])

    def test_quadratic_case(self):
        g, _ = potential_gradient(np.array([1.7, 0.3]), a_only_model())
        np.testing.assert_allclose(g, [1.7, 0.0], atol=1e-15)

    def test_frozen_gradient(self):
        g, _ = potential_gradient(FROZEN_S, frozen_model())
        np.testing.assert_allclose(g, FROZEN_GRAD, rtol=1e-7)

    @pytest.mark.parametrize("d", [1, 2, 8, 43])
    def test_matches_finite_differences(self, d):
        rng = np.random.default_rng(d)
        for _ in range(25):
            th = random_model(d, 16, int(rng.integers(1, 4)), rng)
            s = rng.standard_normal(d + 1)
            g, _ = potential_gradient(s, th)
            fd = fd_gradient(lambda q: potential_forward(q, th), s)
            assert rel_err(g, fd) <= 1e-6

    def test_workspace_holds_backprop_states(self):
        th = frozen_model()
        g, ws = potential_gradient(FROZEN_S, th)
        assert len(ws.zbp) == th.M + 2
        np.testing.assert_array_equal(ws.zbp[th.M + 1][0], th.w)
        np.testing.assert_allclose(ws.zbp[0][0] + th.A.T @ (th.A @ FROZEN_S) + th.b, g, rtol=1e-14)


class TestExactTrace:
    def test_zero_hessian(self):
        th = linear_model([1.0, -2.0, 0.5])
        s = np.array([0.1, 0.2, 0.3])
        _, ws = potential_gradient(s, th)
        assert exact_trace(s, th, ws) == 0.0

    def test_identity_quadratic(self):
        th = a_only_model()
        s = np.array([0.4, 0.6])
        _, ws = potential_gradient(s, th)
        assert exact_trace(s, th, ws) == pytest.approx(1.0, abs=1e-15)

    def test_frozen_trace(self):
        th = frozen_model()
        _, ws = potential_gradient(FROZEN_S, th)
        assert exact_trace(FROZEN_S, th, ws) == pytest.approx(FROZEN_TRACE, rel=1e-9)

    @pytest.mark.parametrize("d,m,M", [(2, 16, 1), (8, 64, 2), (43, 16, 3)])
    def test_matches_brute_force(self, d, m, M):
        rng = np.random.default_rng(100 * d + M)
        th = random_model(d, m, M, rng)
        S = rng.standard_normal((5, d + 1))
        _, ws = potential_gradient(S, th)
        tr = exact_trace(S, th, ws)
        gfun = lambda q: potential_gradient(q, th)[0]
        for s, t in zip(S, tr):
            assert rel_err(t, fd_hessian_trace(gfun, s, d)) <= 1e-6

    def test_single_point_and_batch_agree(self):
        th = frozen_model()
        S = np.random.default_rng(3).standard_normal((4, 3))
        _, ws = potential_gradient(S, th)
        batch = exact_trace(S, th, ws)
        for s, t in zip(S, batch):
            _, w1 = potential_gradient(s, th)
            assert exact_trace(s, th, w1) == pytest.approx(t, rel=1e-13)

    def test_stale_workspace_rejected(self):
        th = frozen_model()
        _, ws = potential_gradient(FROZEN_S, th)
        with pytest.raises(ConfigurationError):
            exact_trace(FROZEN_S + 1.0, th, ws)
        with pytest.raises(ConfigurationError):
            exact_trace(FROZEN_S, frozen_model(), ws)
        th.w[0] += 1.0
        with pytest.raises(ConfigurationError):
            exact_trace(FROZEN_S, th, ws)


class TestHutchinson:
    def test_zero_hessian_every_probe(self):
        th = linear_model([1.0, 2.0, 0.5])
        S = np.random.default_rng(0).standard_normal((6, 3))
        _, ws = potential_gradient(S, th)
        for dist in ("rademacher", "gaussian"):
            assert not hutchinson_trace(S, th, ws, 5, dist, rng=1).any()

    def test_quadratic_form_matches_brute_hessian(self):
        rng = np.random.default_rng(7)
        d = 5
        th = random_model(d, 16, 2, rng)
        s = rng.standard_normal(d + 1)
        _, ws = potential_gradient(s[None], th)
        H = np.empty((d, d))
        for k in range(d):
            e = np.zeros(d + 1)
            e[k] = 1e-5
            H[:, k] = (potential_gradient(s + e, th)[0][:d] - potential_gradient(s - e, th)[0][:d]) / 2e-5
        e = rng.standard_normal((1, d))
        assert hessian_quadratic_form(th, ws, e)[0] == pytest.approx(e[0] @ H @ e[0], rel=1e-6)

    def test_many_probes_converge_to_exact(self):
        rng = np.random.default_rng(43)
        th = random_model(43, 16, 1, rng)
        s = rng.standard_normal(44)
        _, ws = potential_gradient(s, th)
        est = hutchinson_trace(s, th, ws, num_probes=10_000, rng=2)
        assert rel_err(est, exact_trace(s, th, ws)) <= 0.02

    def test_unbiased_within_three_standard_errors(self):
        rng = np.random.default_rng(11)
        th = random_model(8, 16, 2, rng)
        s = rng.standard_normal(9)
        _, ws = potential_gradient(s[None], th)
        probes = np.random.default_rng(5).choice([-1.0, 1.0], size=(100_000, 1, 8))
        q = np.array([hessian_quadratic_form(th, ws, e)[0] for e in probes[:, 0][:, None]])
        exact = exact_trace(s[None], th, ws)[0]
        assert abs(q.mean() - exact) <= 3 * q.std(ddof=1) / np.sqrt(q.size)

    @given(st.integers(0, 2**31 - 1))
    def test_sign_flip_invariance(self, seed):
        rng = np.random.default_rng(seed)
        th = random_model(3, 8, 2, rng)
        S = rng.standard_normal((4, 4))
        _, ws = potential_gradient(S, th)
        e = rng.choice([-1.0, 1.0], size=(4, 3))
        np.testing.assert_allclose(hessian_quadratic_form(th, ws, e),
                                   hessian_quadratic_form(th, ws, -e), rtol=1e-12, atol=1e-14)

    def test_error_decays_like_inverse_sqrt_probes(self):
        rng = np.random.default_rng(21)
        th = random_model(43, 16, 1, rng)
        S = rng.standard_normal((512, 44))
        _, ws = potential_gradient(S, th)
        exact = exact_trace(S, th, ws)
        Ks = [1, 4, 16, 64]
        med = [np.median(np.abs(hutchinson_trace(S, th, ws, K, rng=K) - exact) / np.abs(exact))
               for K in Ks]
        slope = np.polyfit(np.log(Ks), np.log(med), 1)[0]
        assert -0.7 <= slope <= -0.3

    def test_zero_probes_rejected(self):
        th = frozen_model()
        _, ws = potential_gradient(FROZEN_S, th)
        with pytest.raises(ValueError):
            hutchinson_trace(FROZEN_S, th, ws, num_probes=0)
        with pytest.raises(ValueError):
            hutchinson_trace(FROZEN_S, th, ws, dist="cauchy")
