"""Derivatives of log p_theta(x): parameter scores O_k and spatial gradient/Hessian.

Analytic propagation only; the finite-difference helpers at the bottom are
the independent oracles used by the tests and by ``flowtdvp verify``.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma

from .density import CHOLESKY, STUDENT_T, FlowError
from .kernels import flow_param_grad, flow_spatial


@dataclass
class LogDerivatives:
    logp: np.ndarray  # (N,)
    O: np.ndarray  # (N, K)
    grad_x: np.ndarray  # (N, d)
    hess_x: np.ndarray  # (N, d, d)


def latent_param_grads(model, z, out):
    """Write d log pi(z) / d(latent params) into ``out[:, :n_latent]``."""
    st = model.latent_state()
    lay = model.layout
    d = model.dim
    r = z - st.mu
    y = r @ st.prec
    q = np.einsum("ni,ni->n", r, y)
    if st.family == STUDENT_T:
        nu = st.nu
        w = (nu + d) / (nu + q)
    else:
        w = np.ones_like(q)
    out[:, lay["latent.mu"]] = w[:, None] * y

    # d/dSigma = (w y y^T - P) / 2; chain through the covariance factor F.
    F = _factor(model)
    PF = st.prec @ F
    gF = w[:, None, None] * y[:, :, None] * (y @ F)[:, None, :] - PF[None]
    if model.latent.covariance == CHOLESKY:
        rows, cols = np.tril_indices(d)
        g = gF[:, rows, cols]
        diag = rows == cols
        g[:, diag] *= np.diag(F)[None, :]
        out[:, lay["latent.cov_factor"]] = g
    else:
        out[:, lay["latent.cov_factor"]] = gF.reshape(len(z), d * d)

    if st.family == STUDENT_T:
        nu = st.nu
        dnu = (
            0.5 * digamma(0.5 * (nu + d))
            - 0.5 * digamma(0.5 * nu)
            - 0.5 * d / nu
            - 0.5 * np.log1p(q / nu)
            + 0.5 * (nu + d) * q / (nu * (nu + q))
        )
        out[:, lay["latent.nu_raw"]] = (nu * dnu)[:, None]


def _factor(model):
    from .density import _cov_factor_matrix

    return _cov_factor_matrix(model.latent, model.params[model.layout["latent.cov_factor"]])


def param_grad_log_prob(model, x):
    """O_k(x) = d log p / d theta_k. Returns shape (K,) for a point, (N, K) for a batch."""
    single = np.ndim(x) == 1
    X = np.atleast_2d(x)
    O = np.zeros((X.shape[0], model.n_params))
    _, z = flow_param_grad(model, X, O)
    latent_param_grads(model, z, O)
    _check(O)
    return O[0] if single else O


def spatial_derivatives(model, x):
    """(grad_x log p, hess_x log p) at a point or batch."""
    single = np.ndim(x) == 1
    _, grad, hess, _ = flow_spatial(model, np.atleast_2d(x))
    _check(grad, hess)
    return (grad[0], hess[0]) if single else (grad, hess)


def log_derivatives(model, X, spatial=True):
    """Everything the TDVP step needs at once."""
    X = np.atleast_2d(X)
    N = X.shape[0]
    O = np.zeros((N, model.n_params))
    logp, z = flow_param_grad(model, X, O)
    latent_param_grads(model, z, O)
    if spatial:
        _, grad, hess, _ = flow_spatial(model, X)
    else:
        grad = hess = None
    _check(logp, O, *(a for a in (grad, hess) if a is not None))
    return LogDerivatives(logp, O, grad, hess)


def _check(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FlowError("non-finite derivative; parameters are unstable")


# --- finite-difference oracles ----------------------------------------------


def fd_param_grad(model, x, eps=1e-6):
    """Central differences of log_prob in every parameter, shape (K,)."""
    theta = model.params
    out = np.empty(model.n_params)
    for k in range(model.n_params):
        tp = theta.copy()
        tp[k] += eps
        tm = theta.copy()
        tm[k] -= eps
        out[k] = (model.with_params(tp).log_prob(x) - model.with_params(tm).log_prob(x)) / (2 * eps)
    return out


def fd_spatial(model, x, eps=1e-4):
    """Central-difference gradient and Hessian of log_prob at a single point."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    E = np.eye(d) * eps
    f0 = model.log_prob(x)
    grad = np.array([(model.log_prob(x + E[i]) - model.log_prob(x - E[i])) / (2 * eps) for i in range(d)])
    hess = np.empty((d, d))
    for i in range(d):
        hess[i, i] = (model.log_prob(x + E[i]) - 2 * f0 + model.log_prob(x - E[i])) / eps**2
        for j in range(i + 1, d):
            pts = np.array([x + E[i] + E[j], x + E[i] - E[j], x - E[i] + E[j], x - E[i] - E[j]])
            fpp, fpm, fmp, fmm = model.log_prob(pts)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * eps**2)
    return grad, hess
