import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import a_only_model
from otflow.metrics import EvalReport, bootstrap_ci, evaluate_model, inverse_error, mmd
from otflow.objective import LOG_2PI
from otflow.potential import init_params, zero_params


def mmd_loops(X, Q):
    k = lambda a, b: np.exp(-0.5 * np.sum((a - b) ** 2))
    kxx = sum(k(a, b) for a in X for b in X) / len(X) ** 2
    kqq = sum(k(a, b) for a in Q for b in Q) / len(Q) ** 2
    kxq = sum(k(a, b) for a in X for b in Q) / (len(X) * len(Q))
    return kxx + kqq - 2 * kxq


class TestMMD:
    def test_identical_multiset_is_zero(self):
        X = np.random.default_rng(0).standard_normal((300, 2))
        assert mmd(X, X) == 0.0
        assert mmd(X, X[::-1]) == 0.0

    def test_hand_value(self):
        q = np.array([[np.sqrt(2 * np.log(2)), 0.0]])
        assert mmd(np.zeros((1, 2)), q) == pytest.approx(1.0, abs=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        X, Q = rng.standard_normal((17, 3)), rng.standard_normal((9, 3)) + 0.5
        assert mmd(X, Q) == pytest.approx(mmd_loops(X, Q), rel=1e-12)

    def test_tiled_path(self):
        rng = np.random.default_rng(2)
        X, Q = rng.standard_normal((2100, 2)), rng.standard_normal((50, 2))
        K = lambda a, b: np.exp(-0.5 * ((a[:, None] - b[None]) ** 2).sum(-1)).mean()
        assert mmd(X, Q) == pytest.approx(K(X, X) + K(Q, Q) - 2 * K(X, Q), rel=1e-10)

    def test_null_samples_small(self):
        Z = np.random.default_rng(3).standard_normal((20_000, 2))
        assert mmd(Z[:10_000], Z[10_000:]) < 1e-3

    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(-5, 5)),
           arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(-5, 5)))
    def test_symmetric_and_nonnegative(self, X, Q):
        assert mmd(X, Q) == mmd(Q, X)
        assert mmd(X, Q) >= -1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mmd(np.zeros((3, 2)), np.zeros((3, 3)))


class TestInverseError:
    def test_identity(self):
        X = np.random.default_rng(4).standard_normal((50, 2))
        assert inverse_error(X, zero_params(2, 4), 8) == 0.0

    def test_analytic_model(self):
        X = np.random.default_rng(5).standard_normal((50, 1))
        assert inverse_error(X, a_only_model(), 32) <= 1e-6

    def test_monotone_in_nt_on_analytic_model(self):
        X = np.random.default_rng(6).standard_normal((50, 1)) * 2
        errs = [inverse_error(X, a_only_model(), nt) for nt in (4, 8, 16, 32)]
        assert all(a >= b for a, b in zip(errs, errs[1:]))


class TestBootstrap:
    def test_constant_input(self):
        assert bootstrap_ci([0.3] * 20) == (0.3, 0.3)

    def test_protocol_defaults(self):
        x = np.random.default_rng(7).standard_normal(20)
        rng = np.random.default_rng(0)
        idx = rng.integers(0, 20, size=(4000, 16))
        means = x[idx].mean(axis=1)
        expect = tuple(np.percentile(means, [0.5, 99.5]))
        assert bootstrap_ci(x, rng=0) == pytest.approx(expect, rel=1e-14)

    def test_coverage(self):
        rng = np.random.default_rng(8)
        hits = 0
        for trial in range(100):
            lo, hi = bootstrap_ci(rng.standard_normal(20), rng=trial)
            hits += lo <= 0.0 <= hi
        assert hits >= 95

    def test_needs_two_observations(self):
        with pytest.raises(ValueError):
            bootstrap_ci([1.0])


class TestReport:
    def test_identity_model_report(self):
        X = np.random.default_rng(9).standard_normal((2000, 2))
        rep = evaluate_model(X, zero_params(2, 4), nt=4, n_generate=500, seed=1)
        assert rep.inverse_error == 0.0
        assert rep.test_C == pytest.approx(1 + LOG_2PI, abs=0.1)
        assert rep.nfe_forward == rep.nfe_inverse == 16
        rec = json.loads(rep.to_json_line())
        assert set(rec) == {f for f in EvalReport.__dataclass_fields__}
        assert "inverse error" in rep.summary()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_model(np.zeros((5, 3)), init_params(2, 4), nt=2, n_generate=5)
