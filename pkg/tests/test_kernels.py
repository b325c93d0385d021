import numpy as np
import pytest

from oracles import random_model
from otflow import kernels

needs_compiled = pytest.mark.skipif(not kernels.compiled_available(),
                                    reason="compiled kernels not built")


@needs_compiled
@pytest.mark.parametrize("d,m,M", [(1, 4, 1), (2, 16, 2), (8, 16, 3), (43, 32, 1), (100, 8, 2)])
def test_compiled_matches_numpy(d, m, M):
    rng = np.random.default_rng(d * 7 + M)
    th = random_model(d, m, M, rng)
    S = rng.standard_normal((33, d + 1))
    g_py, t_py = kernels.grad_trace(S, th, backend="python")
    g_c, t_c = kernels.grad_trace(S, th, backend="compiled")
    np.testing.assert_allclose(g_c, g_py, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(t_c, t_py, rtol=1e-11, atol=1e-12)


def test_unknown_backend():
    th = random_model(2, 4, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        kernels.grad_trace(np.zeros((1, 3)), th, backend="gpu")


def test_backend_is_reported():
    assert kernels.BACKEND in ("compiled", "python")
    if not kernels.compiled_available():
        assert kernels.BACKEND == "python"
