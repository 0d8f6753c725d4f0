"""Monte-Carlo TDVP linear system S theta_dot = F.

S and F are connected correlators over one sample batch:

    S_kk' = <O_k O_k'> - <O_k><O_k'>
    F_k   = <O_k dlogp> - <O_k><dlogp>
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class StationarityWarning(RuntimeWarning):
    """The Fisher matrix vanished; the parameters cannot move."""


@dataclass
class RegularizationPolicy:
    svd_rel_cutoff: float = 1e-8
    tikhonov_shift: float = 0.0

    def __post_init__(self):
        if self.svd_rel_cutoff < 0 or self.tikhonov_shift < 0:
            raise ValueError("regularization parameters must be non-negative")


@dataclass
class TdvpSystem:
    S: np.ndarray
    F: np.ndarray
    n_samples: int
    O_matrix: np.ndarray = field(repr=False)
    dt_log: np.ndarray = field(repr=False)
    eigvals: np.ndarray = field(default=None, repr=False)
    n_retained: int = 0


@dataclass
class ResidualReport:
    r: float
    r_normalized: float


def assemble(O_matrix, dt_log, weights=None):
    O = np.asarray(O_matrix, dtype=float)
    f = np.asarray(dt_log, dtype=float)
    n = O.shape[0]
    if n < 2:
        raise ValueError("need at least two samples for connected correlators")
    if f.shape != (n,):
        raise ValueError("dt_log must have one entry per sample")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    Oc = O - w @ O
    fc = f - w @ f
    Ow = Oc * w[:, None]
    S = Ow.T @ Oc
    S = 0.5 * (S + S.T)
    F = Ow.T @ fc
    return TdvpSystem(S, F, n, O, f)


def solve(system, policy=None):
    """theta_dot = pinv(S + shift I) F with a relative eigenvalue cutoff."""
    policy = policy or RegularizationPolicy()
    K = system.S.shape[0]
    A = system.S + policy.tikhonov_shift * np.eye(K)
    lam, V = scipy.linalg.eigh(A)
    system.eigvals = lam
    top = np.max(np.abs(lam)) if K else 0.0
    if top == 0.0:
        warnings.warn("Fisher matrix is zero; returning a zero update", StationarityWarning, stacklevel=2)
        system.n_retained = 0
        return np.zeros(K)
    keep = lam > policy.svd_rel_cutoff * top
    system.n_retained = int(keep.sum())
    coeff = (V[:, keep].T @ system.F) / lam[keep]
    theta_dot = V[:, keep] @ coeff
    if not np.all(np.isfinite(theta_dot)):
        raise ArithmeticError("non-finite parameter velocity")
    return theta_dot


def residual(system, theta_dot, p_values):
    """Mean squared mismatch between p * d_t log p and the tangent-space prediction."""
    p = np.asarray(p_values, dtype=float)
    exact = p * system.dt_log
    pred = p * (system.O_matrix @ theta_dot)
    r = float(np.mean((exact - pred) ** 2))
    scale = float(np.mean(exact**2))
    return ResidualReport(r, r / scale if scale > 0 else 0.0)


def spectrum_summary(system):
    lam = system.eigvals
    if lam is None or lam.size == 0:
        return {}
    return {
        "eig_max": float(lam.max()),
        "eig_min": float(lam.min()),
        "n_retained": system.n_retained,
    }
