import json
import os
import subprocess
import sys

import numpy as np
import pytest

from snslab import _kernels as K


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_advect_product_parity(rng):
    a = [rng.standard_normal((3, 18, 18)) for _ in range(4)]
    assert np.allclose(K.advect_product_numba(*a), K.advect_product_numpy(*a), rtol=1e-15, atol=0)
    assert np.array_equal(K.advect_product(*a), a[0] * a[2] + a[1] * a[3])


@pytest.mark.parametrize("kind", [K.G2_ZERO, K.G2_SCALED_IDENTITY, K.G2_SATURATING])
def test_nemytski_parity(rng, kind):
    u = [rng.standard_normal((18, 18)) for _ in range(2)]
    phi = [rng.standard_normal((5, 18, 18)) for _ in range(2)]
    g = rng.standard_normal((2, 18, 18))
    ref = K.nemytski_numpy(*u, *phi, g[0], g[1], kind, 0.7, 1.5)
    got = K.nemytski(*u, *phi, g[0], g[1], kind, 0.7, 1.5)
    for r, o in zip(ref, got):
        assert r.shape == o.shape == (5, 18, 18)
        assert np.allclose(r, o, rtol=1e-14, atol=1e-15)


def test_time_seminorm_parity_and_oracle(rng):
    n = 41
    x = rng.standard_normal((n, 6))
    t = np.linspace(0, 2, n)
    w = np.full(n, 2 / (n - 1))
    gram = x @ x.T
    a = K.time_seminorm_numpy(gram, t, w, 0.3, 2.0)
    b = K.time_seminorm_numba(gram, t, w, 0.3, 2.0)
    assert abs(a - b) <= 1e-12 * a
    # direct double loop over distinct pairs
    ref = sum(w[i] * w[j] * np.sum((x[i] - x[j]) ** 2) / abs(t[i] - t[j]) ** 1.6
              for i in range(n) for j in range(n) if i != j)
    assert abs(a - ref) <= 1e-12 * ref


def test_env_flag_selects_numpy_path():
    code = "import json; from snslab import _kernels as K; print(json.dumps([K.USE_NUMBA, K.HAVE_NUMBA]))"
    env = dict(os.environ, SNSLAB_NO_NUMBA="1")
    off = json.loads(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                                    check=True).stdout)
    env["SNSLAB_NO_NUMBA"] = "0"
    on = json.loads(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                                   check=True).stdout)
    assert off == [False, on[1]]
    assert on == [on[1], on[1]]
