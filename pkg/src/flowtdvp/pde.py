"""Fokker-Planck right-hand sides with constant diffusion matrix.

For dp/dt = -div(mu p) + sum_ij D_ij d_i d_j p the log-form used by the TDVP is

    d_t log p = -div mu - mu . g + sum_ij D_ij (H_ij + g_i g_j)

with g and H the spatial gradient and Hessian of log p.
"""
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .differentiation import spatial_derivatives


@dataclass
class FokkerPlanckProblem:
    dim: int
    drift: Callable  # (X (N, d), t) -> (N, d)
    drift_divergence: Callable  # (X, t) -> (N,)
    diffusion: np.ndarray
    name: str = "custom"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        D = np.asarray(self.diffusion, dtype=float)
        if D.shape != (self.dim, self.dim):
            raise ValueError(f"diffusion matrix must be {self.dim}x{self.dim}")
        if not np.allclose(D, D.T, atol=1e-14):
            raise ValueError("diffusion matrix must be symmetric")
        if np.linalg.eigvalsh(D).min() < -1e-12:
            raise ValueError("diffusion matrix must be positive semi-definite")
        self.diffusion = D

    def check_divergence(self, X, t=0.0, eps=1e-5):
        """Max deviation between the supplied divergence and a central difference."""
        X = np.atleast_2d(X)
        fd = np.zeros(len(X))
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = eps
            fd += (self.drift(X + e, t)[:, i] - self.drift(X - e, t)[:, i]) / (2 * eps)
        return float(np.max(np.abs(fd - self.drift_divergence(X, t))))


def heat_problem(dim, D=1.0):
    """Pure diffusion dp/dt = D Laplacian p."""
    if D < 0:
        raise ValueError("diffusion constant must be non-negative")
    return FokkerPlanckProblem(
        dim,
        drift=lambda X, t: np.zeros_like(X),
        drift_divergence=lambda X, t: np.zeros(len(X)),
        diffusion=D * np.eye(dim),
        name="heat",
        info={"D": float(D)},
    )


@dataclass(frozen=True)
class OscillatorRing:
    """N harmonic oscillators on a ring with nearest-neighbour springs k.

    H = sum 1/2 (m w^2 x_i^2 + p_i^2 / m) + k sum (x_i - x_{(i+1) % N})^2
    """

    n: int
    m: float = 1.0
    omega: float = 1.0
    k: float = 0.0

    def energy(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        spring = x - np.roll(x, -1, axis=-1)
        return (
            0.5 * np.sum(self.m * self.omega**2 * x**2 + p**2 / self.m, axis=-1)
            + self.k * np.sum(spring**2, axis=-1)
        )

    def grad(self, x, p):
        """(dH/dx, dH/dp)."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        dx = self.m * self.omega**2 * x + 2 * self.k * (2 * x - np.roll(x, -1, axis=-1) - np.roll(x, 1, axis=-1))
        return dx, p / self.m


def phase_space_problem(n_osc=3, m=1.0, omega=1.0, k=0.0, gamma=1.0, temps=(10.0, 10.0, 10.0)):
    """Damped oscillator ring coupled to heat baths; coordinates are (x_1..x_N, p_1..p_N).

    ``temps`` are k_B T_i per oscillator.
    """
    temps = np.asarray(temps, dtype=float)
    if temps.shape != (n_osc,):
        raise ValueError(f"need {n_osc} bath temperatures, got {temps.shape}")
    if min(m, omega) <= 0 or min(k, gamma) < 0 or np.any(temps < 0):
        raise ValueError("m and omega must be positive; k, gamma and temperatures non-negative")
    ring = OscillatorRing(n_osc, m, omega, k)
    N = n_osc

    def drift(X, t):
        x, p = X[:, :N], X[:, N:]
        dHdx, dHdp = ring.grad(x, p)
        return np.concatenate([dHdp, -gamma * p - dHdx], axis=1)

    D = np.zeros((2 * N, 2 * N))
    D[N:, N:] = np.diag(gamma * m * temps)
    return FokkerPlanckProblem(
        2 * N,
        drift=drift,
        drift_divergence=lambda X, t: np.full(len(X), -gamma * N),
        diffusion=D,
        name="phase_space",
        info={"n_osc": N, "m": m, "omega": omega, "k": k, "gamma": gamma, "temps": temps.tolist(), "ring": ring},
    )


def _ring(problem):
    try:
        return problem.info["ring"]
    except KeyError:
        raise ValueError("problem has no Hamiltonian") from None


def hamiltonian(problem, x, p):
    return _ring(problem).energy(x, p)


def hamiltonian_grad(problem, x, p):
    """(dH/dx, dH/dp)."""
    return _ring(problem).grad(x, p)


def dt_log_from_derivs(problem, X, t, grad, hess):
    mu = problem.drift(X, t)
    D = problem.diffusion
    out = -problem.drift_divergence(X, t) - np.einsum("ni,ni->n", mu, grad)
    out += np.einsum("ij,nij->n", D, hess) + np.einsum("ni,ij,nj->n", grad, D, grad)
    return out


def dt_log_prob(problem, model, x, t=0.0):
    """(dp/dt) / p at ``x`` for the density encoded by ``model``."""
    single = np.ndim(x) == 1
    X = np.atleast_2d(x)
    grad, hess = spatial_derivatives(model, X)
    out = dt_log_from_derivs(problem, X, t, grad, hess)
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("non-finite d_t log p")
    return out[0] if single else out
