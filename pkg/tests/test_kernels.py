"""The numba and numpy kernel sets must agree."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3s import kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@pytest.fixture(params=[np.float32, np.float64])
def data(request):
    rng = np.random.default_rng(0)
    dt = request.param
    return dt, rng.normal(size=(7, 5)).astype(dt), rng.normal(size=(7, 5)).astype(dt)


def _tol(dt):
    return dict(rtol=1e-5, atol=1e-6) if dt == np.float32 else dict(rtol=1e-12, atol=1e-13)


def test_softmax_pair(data):
    dt, x, g = data
    y = K.softmax_fwd_np(x)
    np.testing.assert_allclose(K.softmax_fwd_nb(x), y, **_tol(dt))
    np.testing.assert_allclose(K.softmax_bwd_nb(y, g), K.softmax_bwd_np(y, g), **_tol(dt))


def test_log_softmax_pair(data):
    dt, x, g = data
    y = K.log_softmax_fwd_np(x)
    np.testing.assert_allclose(K.log_softmax_fwd_nb(x), y, **_tol(dt))
    np.testing.assert_allclose(K.log_softmax_bwd_nb(y, g), K.log_softmax_bwd_np(y, g), **_tol(dt))


def test_layernorm_pair(data):
    dt, x, g = data
    gamma = np.linspace(0.5, 1.5, 5).astype(dt)
    beta = np.linspace(-1, 1, 5).astype(dt)
    eps = dt(1e-5)
    for a, b in zip(K.layernorm_fwd_nb(x, gamma, beta, eps), K.layernorm_fwd_np(x, gamma, beta, eps)):
        np.testing.assert_allclose(a, b, **_tol(dt))
    _, xhat, rstd = K.layernorm_fwd_np(x, gamma, beta, eps)
    for a, b in zip(K.layernorm_bwd_nb(g, xhat, rstd, gamma), K.layernorm_bwd_np(g, xhat, rstd, gamma)):
        np.testing.assert_allclose(a, b, **_tol(dt))


def test_gelu_pair(data):
    dt, x, g = data
    np.testing.assert_allclose(K.gelu_fwd_nb(x), K.gelu_fwd_np(x), **_tol(dt))
    np.testing.assert_allclose(K.gelu_bwd_nb(x, g), K.gelu_bwd_np(x, g), **_tol(dt))


def test_scatter_pair(data):
    dt, _, g = data
    ids = np.array([0, 3, 3, 1, 0, 2, 3], dtype=np.int64)
    np.testing.assert_allclose(K.scatter_rows_nb(ids, g, 4), K.scatter_rows_np(ids, g, 4), **_tol(dt))


@settings(max_examples=50, deadline=None)
@given(a=st.lists(st.integers(0, 4), max_size=9), b=st.lists(st.integers(0, 4), max_size=9))
def test_lcs_pair(a, b):
    a, b = np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
    assert K.lcs_length_nb(a, b) == K.lcs_length_np(a, b)


def test_backend_switch_rebinds_names():
    before = K.backend()
    try:
        K.use_backend("numpy")
        assert K.softmax_fwd is K.softmax_fwd_np
        K.use_backend("numba")
        assert K.softmax_fwd is K.softmax_fwd_nb
    finally:
        K.use_backend(before)
    with pytest.raises(ValueError):
        K.use_backend("cuda")


def test_model_forward_agrees_across_backends():
    from conftest import micro_config, random_model, random_vision

    cfg = micro_config()
    rng = np.random.default_rng(0)
    model = random_model(cfg, seed=2)
    ids = rng.integers(4, cfg.vocab_size, size=(2, cfg.max_src_len))
    mask = np.ones_like(ids)
    vis = random_vision(rng, cfg)
    dec = rng.integers(4, cfg.vocab_size, size=(2, cfg.max_tgt_len))
    before = K.backend()
    outs = {}
    try:
        for name in ("numpy", "numba"):
            K.use_backend(name)
            outs[name] = model.forward(ids, mask, vis, dec, np.ones_like(dec)).logits.data
    finally:
        K.use_backend(before)
    np.testing.assert_allclose(outs["numba"], outs["numpy"], rtol=1e-5, atol=1e-5)


def test_env_flag_selects_numpy():
    import subprocess
    import sys
    code = "from m3s import kernels as K; print(K.backend())"
    env_out = subprocess.run([sys.executable, "-c", code], env={**__import__("os").environ, "M3S_NUMBA": "0"},
                             capture_output=True, text=True, check=True).stdout.strip()
    assert env_out == "numpy"
