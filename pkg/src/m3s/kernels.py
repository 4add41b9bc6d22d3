"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel works on 2-D C-contiguous arrays (rows x features). The public
names (``softmax_fwd`` and friends) are bound at import time: the numba
versions when numba imports and ``M3S_NUMBA`` is not set to a false value,
the numpy versions otherwise. Both variants stay importable under ``*_np``
and ``*_nb`` so they can be compared directly.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _flag_enabled(name, default="1"):
    return os.environ.get(name, default).strip().lower() not in ("0", "false", "off", "no", "")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _flag_enabled("M3S_NUMBA")

_GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------- numpy path

def softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def log_softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_bwd_np(out, gy):
    return gy - np.exp(out) * gy.sum(axis=1, keepdims=True)


def layernorm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd_np(gy, xhat, rstd, gamma):
    gxhat = gy * gamma
    d = xhat.shape[1]
    m1 = gxhat.sum(axis=1, keepdims=True) / d
    m2 = (gxhat * xhat).sum(axis=1, keepdims=True) / d
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd_np(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd_np(x, gy):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def scatter_rows_np(ids, g, n_rows):
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    np.add.at(out, ids, g)
    return out


def lcs_length_np(a, b):
    if len(a) == 0 or len(b) == 0:
        return 0
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    bb = np.asarray(b)
    for x in a:
        cur = np.zeros_like(prev)
        match = bb == x
        # cur[j+1] = prev[j] + 1 on match, else max(prev[j+1], cur[j]); the
        # running max over cur forces a python loop per row.
        for j in range(len(bb)):
            if match[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = max(prev[j + 1], cur[j])
        prev = cur
    return int(prev[-1])


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True, fastmath=False)

    @_jit
    def softmax_fwd_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            mx = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > mx:
                    mx = x[r, c]
            s = 0.0
            for c in range(cols):
                e = math.exp(x[r, c] - mx)
                out[r, c] = e
                s += e
            for c in range(cols):
                out[r, c] = out[r, c] / s
        return out

    @_jit
    def softmax_bwd_nb(y, gy):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += gy[r, c] * y[r, c]
            for c in range(cols):
                out[r, c] = y[r, c] * (gy[r, c] - dot)
        return out

    @_jit
    def log_softmax_fwd_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            mx = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > mx:
                    mx = x[r, c]
            s = 0.0
            for c in range(cols):
                s += math.exp(x[r, c] - mx)
            lse = math.log(s)
            for c in range(cols):
                out[r, c] = x[r, c] - mx - lse
        return out

    @_jit
    def log_softmax_bwd_nb(out, gy):
        rows, cols = out.shape
        gx = np.empty_like(out)
        for r in range(rows):
            s = 0.0
            for c in range(cols):
                s += gy[r, c]
            for c in range(cols):
                gx[r, c] = gy[r, c] - math.exp(out[r, c]) * s
        return gx

    @_jit
    def layernorm_fwd_nb(x, gamma, beta, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for c in range(cols):
                mu += x[r, c]
            mu /= cols
            var = 0.0
            for c in range(cols):
                dv = x[r, c] - mu
                var += dv * dv
            var /= cols
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for c in range(cols):
                xh = (x[r, c] - mu) * rs
                xhat[r, c] = xh
                y[r, c] = xh * gamma[c] + beta[c]
        return y, xhat, rstd

    @_jit
    def layernorm_bwd_nb(gy, xhat, rstd, gamma):
        rows, cols = gy.shape
        gx = np.empty_like(gy)
        ggamma = np.zeros(cols, dtype=gy.dtype)
        gbeta = np.zeros(cols, dtype=gy.dtype)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for c in range(cols):
                gh = gy[r, c] * gamma[c]
                m1 += gh
                m2 += gh * xhat[r, c]
                ggamma[c] += gy[r, c] * xhat[r, c]
                gbeta[c] += gy[r, c]
            m1 /= cols
            m2 /= cols
            for c in range(cols):
                gx[r, c] = rstd[r] * (gy[r, c] * gamma[c] - m1 - xhat[r, c] * m2)
        return gx, ggamma, gbeta

    @_jit
    def gelu_fwd_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            for c in range(cols):
                v = x[r, c]
                out[r, c] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
        return out

    @_jit
    def gelu_bwd_nb(x, gy):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            for c in range(cols):
                v = x[r, c]
                t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
                dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
                out[r, c] = gy[r, c] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out

    @_jit
    def scatter_rows_nb(ids, g, n_rows):
        out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
        for r in range(ids.shape[0]):
            k = ids[r]
            for c in range(g.shape[1]):
                out[k, c] += g[r, c]
        return out

    @_jit
    def lcs_length_nb(a, b):
        na = a.shape[0]
        nb = b.shape[0]
        if na == 0 or nb == 0:
            return 0
        prev = np.zeros(nb + 1, dtype=np.int64)
        cur = np.zeros(nb + 1, dtype=np.int64)
        for i in range(na):
            cur[0] = 0
            for j in range(nb):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif prev[j + 1] >= cur[j]:
                    cur[j + 1] = prev[j + 1]
                else:
                    cur[j + 1] = cur[j]
            prev, cur = cur, prev
        return prev[nb]


_NAMES = (
    "softmax_fwd", "softmax_bwd", "log_softmax_fwd", "log_softmax_bwd",
    "layernorm_fwd", "layernorm_bwd", "gelu_fwd", "gelu_bwd",
    "scatter_rows", "lcs_length",
)


def backend():
    """Name of the kernel set currently bound to the public names."""
    return "numba" if USE_NUMBA else "numpy"


def use_backend(name):
    """Rebind the public kernel names to ``"numba"`` or ``"numpy"``."""
    global USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    USE_NUMBA = name == "numba"
    suffix = "_nb" if USE_NUMBA else "_np"
    g = globals()
    for n in _NAMES:
        g[n] = g[n + suffix]


use_backend("numba" if USE_NUMBA else "numpy")
