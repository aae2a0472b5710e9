"""Sequential inner loops, each with a numba and a pure-numpy implementation.

The numpy variants loop over time and vectorize across repetitions; the numba
variants loop over both. :data:`nanodeloc._accel.USE_NUMBA` picks the default.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# -- affine Gauss-Markov propagation -------------------------------------------

@njit(nogil=True)
def _propagate_numba(x0, f0, m, b, chol, xi):
    n_rep = x0.shape[0]
    n_step = m.shape[0]
    out = np.empty((n_rep, n_step + 1, 2))
    for i in range(n_rep):
        z = x0[i, 0]
        p = x0[i, 1]
        out[i, 0, 0] = z
        out[i, 0, 1] = p
        f = f0[i]
        for k in range(n_step):
            e0 = xi[i, k, 0]
            e1 = xi[i, k, 1]
            zn = m[k, 0, 0] * z + m[k, 0, 1] * p + f * b[k, 0] + chol[k, 0, 0] * e0
            pn = m[k, 1, 0] * z + m[k, 1, 1] * p + f * b[k, 1] + chol[k, 1, 0] * e0 + chol[k, 1, 1] * e1
            z = zn
            p = pn
            out[i, k + 1, 0] = z
            out[i, k + 1, 1] = p
    return out


def _propagate_numpy(x0, f0, m, b, chol, xi):
    n_rep = x0.shape[0]
    n_step = m.shape[0]
    out = np.empty((n_rep, n_step + 1, 2))
    z = x0[:, 0].copy()
    p = x0[:, 1].copy()
    out[:, 0, 0] = z
    out[:, 0, 1] = p
    for k in range(n_step):
        e0 = xi[:, k, 0]
        e1 = xi[:, k, 1]
        zn = m[k, 0, 0] * z + m[k, 0, 1] * p + f0 * b[k, 0] + chol[k, 0, 0] * e0
        pn = m[k, 1, 0] * z + m[k, 1, 1] * p + f0 * b[k, 1] + chol[k, 1, 0] * e0 + chol[k, 1, 1] * e1
        z, p = zn, pn
        out[:, k + 1, 0] = z
        out[:, k + 1, 1] = p
    return out


def propagate(x0, f0, m, b, chol, xi, use_numba=None):
    """Run ``x[k+1] = m[k] x[k] + f0 b[k] + chol[k] xi[k]`` for every repetition.

    Parameters
    ----------
    x0 : (R, 2) initial states
    f0 : (R,) stray force per repetition
    m, chol : (S, 2, 2) step maps and lower Cholesky factors of the step noise
    b : (S, 2) unit-force offsets
    xi : (R, S, 2) standard normal draws

    Returns
    -------
    (R, S + 1, 2) trajectories, including the initial state.
    """
    args = tuple(np.ascontiguousarray(a, dtype=np.float64) for a in (x0, f0, m, b, chol, xi))
    if use_numba is None:
        use_numba = USE_NUMBA
    return _propagate_numba(*args) if use_numba else _propagate_numpy(*args)


# -- backward two-state linear filter (trapezoidal) ------------------------------

@njit(nogil=True)
def _filter2_numba(u, ad, bd):
    n_rep, n = u.shape
    out = np.empty((n_rep, n, 2))
    for i in range(n_rep):
        x0 = 0.0
        x1 = 0.0
        prev = 0.0
        for k in range(n):
            uk = u[i, k]
            s = uk + prev
            y0 = ad[0, 0] * x0 + ad[0, 1] * x1 + bd[0] * s
            y1 = ad[1, 0] * x0 + ad[1, 1] * x1 + bd[1] * s
            x0 = y0
            x1 = y1
            prev = uk
            out[i, k, 0] = x0
            out[i, k, 1] = x1
    return out


def _filter2_numpy(u, ad, bd):
    n_rep, n = u.shape
    out = np.empty((n_rep, n, 2))
    x0 = np.zeros(n_rep)
    x1 = np.zeros(n_rep)
    prev = np.zeros(n_rep)
    for k in range(n):
        uk = u[:, k]
        s = uk + prev
        y0 = ad[0, 0] * x0 + ad[0, 1] * x1 + bd[0] * s
        y1 = ad[1, 0] * x0 + ad[1, 1] * x1 + bd[1] * s
        x0, x1 = y0, y1
        prev = uk
        out[:, k, 0] = x0
        out[:, k, 1] = x1
    return out


def filter2(u, ad, bd, use_numba=None):
    """Causal recursion ``x[k] = ad x[k-1] + bd (u[k] + u[k-1])`` from rest.

    ``u`` is (R, N); returns (R, N, 2).
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    ad = np.ascontiguousarray(ad, dtype=np.float64)
    bd = np.ascontiguousarray(bd, dtype=np.float64)
    if use_numba is None:
        use_numba = USE_NUMBA
    return _filter2_numba(u, ad, bd) if use_numba else _filter2_numpy(u, ad, bd)
