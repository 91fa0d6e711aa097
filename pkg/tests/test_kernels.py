"""Compiled kernels against the numpy fallback, and backend selection."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfm import kernels
from dfm.kernels import _pykernels as py

needs_compiled = pytest.mark.skipif(kernels.compiled is None, reason="compiled extension not built")
BACKENDS = [py] + ([kernels.compiled] if kernels.compiled is not None else [])


def _adaln_args(rng, B, H, M):
    return (
        rng.standard_normal((B, H)),
        rng.standard_normal((B, H)),
        rng.uniform(-0.5, 0.5, (H, 3 * H)),
        rng.uniform(-0.5, 0.5, 3 * H),
        rng.uniform(-0.5, 0.5, (H, M)),
        rng.uniform(-0.5, 0.5, M),
        rng.uniform(-0.5, 0.5, (M, H)),
        rng.uniform(-0.5, 0.5, H),
    )


@needs_compiled
class TestAgreement:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 7), st.integers(1, 7))
    def test_dense(self, seed, B, n, m):
        rng = np.random.default_rng(seed)
        x, w, b = rng.standard_normal((B, n)), rng.standard_normal((n, m)), rng.standard_normal(m)
        np.testing.assert_allclose(kernels.compiled.dense_rows(x, w, b), py.dense_rows(x, w, b),
                                   rtol=1e-12, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9))
    def test_adaln(self, seed, B, H, M):
        args = _adaln_args(np.random.default_rng(seed), B, H, M)
        np.testing.assert_allclose(kernels.compiled.adaln_rows(*args), py.adaln_rows(*args), rtol=1e-11, atol=1e-11)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 30), st.integers(1, 4))
    def test_pair_sums(self, seed, n, m, d):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((n, d)), rng.standard_normal((m, d))
        c = kernels.compiled
        assert c.pair_sum_l1(a) == pytest.approx(py.pair_sum_l1(a), rel=1e-12, abs=1e-12)
        assert c.pair_sum_euclid(a) == pytest.approx(py.pair_sum_euclid(a), rel=1e-12, abs=1e-12)
        assert c.cross_sum_euclid(a, b) == pytest.approx(py.cross_sum_euclid(a, b), rel=1e-12)

    def test_row_invariance(self):
        """A row's result does not depend on which batch it is part of."""
        rng = np.random.default_rng(0)
        args = _adaln_args(rng, 9, 16, 16)
        full = kernels.compiled.adaln_rows(*args)
        for i in range(9):
            one = kernels.compiled.adaln_rows(args[0][i:i + 1], args[1][i:i + 1], *args[2:])
            np.testing.assert_array_equal(one[0], full[i])


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
class TestEachBackend:
    def test_dense_hand(self, mod):
        out = mod.dense_rows(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0, -1.0], [0.5, 1.0, 2.0]]),
                             np.array([0.0, 1.0, 0.5]))
        np.testing.assert_array_equal(out, [[2.0, 3.0, 3.5]])

    def test_pair_hand(self, mod):
        y = np.array([[0.0], [1.0], [3.0]])
        assert mod.pair_sum_l1(y) == 6.0
        assert mod.pair_sum_euclid(y) == 6.0
        assert mod.cross_sum_euclid(y, np.array([[0.0]])) == 4.0

    def test_shape_errors(self, mod):
        with pytest.raises(ValueError):
            mod.dense_rows(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            mod.cross_sum_euclid(np.zeros((2, 3)), np.zeros((2, 2)))
        args = list(_adaln_args(np.random.default_rng(0), 2, 4, 4))
        args[1] = np.zeros((3, 4))
        with pytest.raises(ValueError):
            mod.adaln_rows(*args)


def _backend_in_subprocess(env_value):
    env = dict(os.environ)
    env["DFM_PURE_PYTHON"] = env_value
    out = subprocess.run([sys.executable, "-c", "import dfm.kernels as k; print(k.BACKEND)"], env=env,
                         capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_env_forces_python_fallback():
    assert _backend_in_subprocess("1") == "python"


@needs_compiled
def test_compiled_selected_by_default():
    assert _backend_in_subprocess("") == "cython"
    assert kernels.BACKEND == "cython"
