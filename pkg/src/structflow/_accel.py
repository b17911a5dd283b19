"""Numba switch for the inference kernels.

Set ``STRUCTFLOW_DISABLE_NUMBA=1`` before import to run every kernel as plain
numpy code. The kernels are written in array style over the tag dimension so
that the interpreted path stays usable, only slower.
"""
import os

import numpy as np

DISABLE_ENV = "STRUCTFLOW_DISABLE_NUMBA"

USE_NUMBA = os.environ.get(DISABLE_ENV, "").strip().lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

if USE_NUMBA:

    def jit(func):
        return numba.njit(cache=True, nogil=True)(func)

else:

    def jit(func):
        return func


NEG_INF = -np.inf


@jit
def logsumexp_vec(v):
    m = v.max()
    if m == NEG_INF:
        return NEG_INF
    return m + np.log(np.exp(v - m).sum())


if USE_NUMBA:

    @jit
    def logsumexp_rows(a):
        """Log-sum-exp of each row of a 2-d array."""
        out = np.empty(a.shape[0])
        for r in range(a.shape[0]):
            out[r] = logsumexp_vec(a[r])
        return out

    @jit
    def logsumexp_cols(a):
        out = np.empty(a.shape[1])
        for c in range(a.shape[1]):
            out[c] = logsumexp_vec(a[:, c])
        return out

else:

    def logsumexp_rows(a):
        """Log-sum-exp of each row of a 2-d array."""
        m = a.max(axis=1)
        safe = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            return safe + np.log(np.exp(a - safe[:, None]).sum(axis=1))

    def logsumexp_cols(a):
        return logsumexp_rows(a.T)

