"""Hot per-sample kernels with a numba implementation and a numpy fallback.

The backend is picked by :mod:`flowtdvp._accel` (env ``FLOWTDVP_NUMBA``).
"""
import numpy as np

from .. import _accel
from ..density import STUDENT_T
from . import _numpy


def _latent_consts(model):
    st = model.latent_state()
    is_t = model.latent.family == STUDENT_T
    return is_t, st.mu, st.prec, (st.nu if is_t else 1.0), st.log_norm


def flow_spatial(model, X):
    """Returns (log p, grad_x log p, hess_x log p, z) for rows of ``X``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    lat = _latent_consts(model)
    meta = model.meta
    if _accel.use_numba():
        from . import _numba

        N, d = X.shape
        logp = np.empty(N)
        grad = np.empty((N, d))
        hess = np.empty((N, d, d))
        z = np.empty((N, d))
        _numba.spatial_kernel(model.params, meta.perms, meta.n_first, meta.net_off, meta.hidden, meta.clamp,
                              *lat, X, logp, grad, hess, z)
        return logp, grad, hess, z
    return _numpy.spatial(model.params, meta, lat, X)


def flow_param_grad(model, X, O):
    """Fill the coupling-block columns of ``O`` (N, K); returns (log p, z)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    lat = _latent_consts(model)
    meta = model.meta
    if _accel.use_numba():
        from . import _numba

        N, d = X.shape
        logp = np.empty(N)
        z = np.empty((N, d))
        _numba.param_kernel(model.params, meta.perms, meta.n_first, meta.net_off, meta.hidden, meta.clamp,
                            *lat, X, O, logp, z)
        return logp, z
    return _numpy.param_grad(model.params, meta, lat, X, O)
