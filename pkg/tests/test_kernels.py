import os
import subprocess
import sys

import numpy as np
import pytest

from epicoord import kernels
from epicoord._accel import ENV_FLAG, HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def _both(name, *args):
    out = {}
    for b in ("numba", "numpy"):
        prev = kernels.set_backend(b)
        try:
            out[b] = getattr(kernels, name)(*args)
        finally:
            kernels.set_backend(prev)
    return out["numba"], out["numpy"]


def _random_system(seed, n=6, days=90):
    rng = np.random.default_rng(seed)
    x0 = np.zeros((n, 6))
    x0[:, 0] = rng.uniform(1e4, 1e6, n)
    x0[:, 1:4] = rng.uniform(0, 500, (n, 3))
    flows = rng.uniform(0, 2000, (days, n, n))
    params = np.empty((days, n, 6))
    params[..., 0] = rng.uniform(0.1, 1.0, (days, n))
    params[..., 1] = params[..., 0] * rng.uniform(0, 0.9, (days, n))
    params[..., 2] = rng.uniform(0.07, 0.5, (days, n))
    params[..., 3] = rng.uniform(0, 0.4, (days, n))
    params[..., 4] = rng.uniform(0.03, 0.33, (days, n))
    params[..., 5] = rng.uniform(0, 0.05, (days, n))
    screening = rng.uniform(0, 1, (days, n, n)) * (rng.random((days, n, n)) < 0.2)
    return x0, x0[:, 3].copy(), flows, params, screening


@needs_numba
@pytest.mark.parametrize("seed", range(5))
def test_run_days_backends_agree(seed):
    a, b = _both("run_days", *_random_system(seed))
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-8)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-8)
    assert list(a[2]) == list(b[2]) and a[3] == b[3]


@needs_numba
def test_run_days_error_status_agree():
    x0, cum0, flows, params, screening = _random_system(9, days=10)
    params[3, 2, 2] = 5.0  # sigma above one empties E past zero
    a, b = _both("run_days", x0, cum0, flows, params, screening)
    assert list(a[2]) == list(b[2])
    assert a[2][0] == kernels.ERR_NEGATIVE and a[2][1] == 3 and a[2][2] == 2
    assert a[0].shape == b[0].shape == (5, 6, 6)
    # the failing day's row is diagnostic only; earlier days must agree
    np.testing.assert_allclose(a[0][:-1], b[0][:-1], rtol=1e-12)


@needs_numba
def test_renewal_gamma_shapley_agree():
    rng = np.random.default_rng(1)
    inc = rng.uniform(0, 100, 200)
    w = rng.dirichlet(np.ones(20))
    a, b = _both("renewal_intensity", inc, w)
    np.testing.assert_allclose(a, b, rtol=1e-13)
    for shape, x in [(0.5, 0.1), (6.25, 3.0), (101.0, 90.0), (1e4, 9.9e3)]:
        a, b = _both("gammainc", shape, x)
        # numba's lgamma differs from libm's by ~1e-11 relative at very large shapes
        assert a == pytest.approx(b, rel=1e-10)
        a, b = _both("gammaincinv", shape, 0.975)
        assert a == pytest.approx(b, rel=1e-10)
    vals = rng.normal(size=1 << 8)
    a, b = _both("shapley_from_values", vals, 8)
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_set_backend_validates():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
    prev = kernels.set_backend("numpy")
    assert kernels.backend() == "numpy"
    kernels.set_backend(prev)


def test_env_flag_forces_numpy():
    env = dict(os.environ, **{ENV_FLAG: "1"})
    out = subprocess.run([sys.executable, "-c", "from epicoord import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_shapley_table_size_checked():
    with pytest.raises(ValueError, match="2\\*\\*3"):
        kernels.shapley_from_values(np.zeros(7), 3)
