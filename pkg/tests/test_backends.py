import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from merv.numerics import kernels

compiled = pytest.mark.skipif(kernels.compiled is None, reason="compiled extension not built")

shapes = st.tuples(st.integers(1, 6), st.integers(1, 10), st.integers(1, 10), st.integers(1, 5)).flatmap(
    lambda s: st.tuples(st.just(s), st.integers(1, s[0]), st.integers(1, s[1]), st.integers(1, s[2]))
)


@compiled
@given(shapes, st.sampled_from([np.float32, np.float64]), st.integers(0, 999))
def test_pool_forward_backends_agree(case, dtype, seed):
    (T, H, W, D), t, h, w = case
    x = np.random.default_rng(seed).standard_normal((T, H, W, D)).astype(dtype)
    a = kernels.compiled.pool_forward(x, t, h, w)
    b = kernels.fallback.pool_forward(x, t, h, w)
    assert a.dtype == b.dtype == dtype
    tol = 1e-6 if dtype == np.float32 else 1e-13
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@compiled
@given(shapes, st.sampled_from([np.float32, np.float64]), st.integers(0, 999))
def test_pool_backward_backends_agree(case, dtype, seed):
    (T, H, W, D), t, h, w = case
    g = np.random.default_rng(seed).standard_normal((t, h, w, D)).astype(dtype)
    a = kernels.compiled.pool_backward(g, T, H, W)
    b = kernels.fallback.pool_backward(g, T, H, W)
    tol = 1e-6 if dtype == np.float32 else 1e-13
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


def test_backend_listing():
    found = kernels.backends()
    assert "numpy" in found
    assert kernels.BACKEND in found
    assert kernels.active is found[kernels.BACKEND]


def test_pure_python_env_forces_fallback():
    env = dict(os.environ, MERV_PURE_PYTHON="1")
    code = "from merv.numerics import kernels, adaptive_avg_pool2d; import numpy as np; " \
           "print(kernels.BACKEND, adaptive_avg_pool2d(np.ones((1, 4, 4, 1)), 2, 2).sum())"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "4.0"]
