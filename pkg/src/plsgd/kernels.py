"""Hot inner loops for the SGD iteration.

Two interchangeable backends: numba-compiled kernels (default when numba
is importable) and pure-numpy reference implementations. The backend is
chosen at import from the ``PLSGD_BACKEND`` environment variable
("numba" or "numpy") and can be switched at runtime with
:func:`select_backend`. Both backends consume the same index streams, so
a run differs across backends only in floating-point summation order.

Kernel contract: ``(exited, diverged_at) = *_steps(X, y, w, w_star, eta,
idx, r2_cap)``. ``w`` is updated in place, one update per entry of
``idx``. ``exited`` reports whether any iterate left the ball
``||w - w_star||^2 <= r2_cap``; ``diverged_at`` is the step index within
``idx`` at which the iterate became non-finite, or -1.
"""

from __future__ import annotations

import math
import os

import numpy as np

ENV_VAR = "PLSGD_BACKEND"


def _numpy_linear_steps(X, y, w, w_star, eta, idx, r2_cap):
    exited = False
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite is handled below
        for k in range(idx.shape[0]):
            x = X[idx[k]]
            c = eta * (float(x @ w) - y[idx[k]])
            w -= c * x
            e = w - w_star
            s = float(e @ e)
            if not math.isfinite(s):
                return exited, k
            if s > r2_cap:
                exited = True
    return exited, -1


def _numpy_sine_steps(X, y, w, w_star, eta, amp, idx, r2_cap):
    exited = False
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(idx.shape[0]):
            x = X[idx[k]]
            z = float(x @ w)
            resid = z + amp * math.sin(z) - y[idx[k]]
            c = eta * resid * (1.0 + amp * math.cos(z))
            w -= c * x
            e = w - w_star
            s = float(e @ e)
            if not math.isfinite(s):
                return exited, k
            if s > r2_cap:
                exited = True
    return exited, -1


_IMPLS = {"numpy": (_numpy_linear_steps, _numpy_sine_steps)}

try:
    from numba import njit

    HAVE_NUMBA = True

    @njit(cache=True, nogil=True)
    def _numba_linear_steps(X, y, w, w_star, eta, idx, r2_cap):
        d = w.shape[0]
        exited = False
        for k in range(idx.shape[0]):
            i = idx[k]
            z = 0.0
            for j in range(d):
                z += X[i, j] * w[j]
            c = eta * (z - y[i])
            s = 0.0
            for j in range(d):
                w[j] -= c * X[i, j]
                e = w[j] - w_star[j]
                s += e * e
            if not math.isfinite(s):
                return exited, k
            if s > r2_cap:
                exited = True
        return exited, -1

    @njit(cache=True, nogil=True)
    def _numba_sine_steps(X, y, w, w_star, eta, amp, idx, r2_cap):
        d = w.shape[0]
        exited = False
        for k in range(idx.shape[0]):
            i = idx[k]
            z = 0.0
            for j in range(d):
                z += X[i, j] * w[j]
            resid = z + amp * math.sin(z) - y[i]
            c = eta * resid * (1.0 + amp * math.cos(z))
            s = 0.0
            for j in range(d):
                w[j] -= c * X[i, j]
                e = w[j] - w_star[j]
                s += e * e
            if not math.isfinite(s):
                return exited, k
            if s > r2_cap:
                exited = True
        return exited, -1

    _IMPLS["numba"] = (_numba_linear_steps, _numba_sine_steps)
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _default_backend() -> str:
    requested = os.environ.get(ENV_VAR, "").strip().lower()
    if requested:
        if requested not in ("numba", "numpy"):
            raise ValueError(f"{ENV_VAR} must be 'numba' or 'numpy', got {requested!r}")
        if requested == "numba" and not HAVE_NUMBA:
            raise RuntimeError(f"{ENV_VAR}=numba but numba is not importable")
        return requested
    return "numba" if HAVE_NUMBA else "numpy"


_ACTIVE = _default_backend()


def backend() -> str:
    """Name of the backend currently used for the step kernels."""
    return _ACTIVE


def select_backend(name: str) -> None:
    """Switch kernel backend ("numba" or "numpy") for subsequent runs."""
    global _ACTIVE
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_IMPLS)}")
    _ACTIVE = name


def linear_steps(X, y, w, w_star, eta, idx, r2_cap):
    return _IMPLS[_ACTIVE][0](X, y, w, w_star, eta, idx, r2_cap)


def sine_steps(X, y, w, w_star, eta, amp, idx, r2_cap):
    return _IMPLS[_ACTIVE][1](X, y, w, w_star, eta, amp, idx, r2_cap)


def implementations(name: str):
    """Expose a specific backend pair (linear, sine), e.g. for benchmarks."""
    return _IMPLS[name]
