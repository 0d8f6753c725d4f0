"""Independent baselines: closed forms, the radial 1D heat solver and SDE ensembles."""
from dataclasses import dataclass, replace

import numpy as np
import scipy.integrate
import scipy.linalg
from scipy.special import digamma, gammaln, gammainc

from . import _accel
from ._accel import optional_njit

LOG_2PI_E = float(np.log(2 * np.pi * np.e))


# --- closed-form oracles -------------------------------------------------------


def gaussian_entropy(cov):
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance must be positive definite")
    return 0.5 * d * LOG_2PI_E + 0.5 * logdet


def student_t_entropy(d, nu, logdet_scale=0.0):
    """Differential entropy of a d-dimensional Student-t with scale matrix of log-det ``logdet_scale``."""
    return float(
        -gammaln(0.5 * (nu + d))
        + gammaln(0.5 * nu)
        + 0.5 * d * np.log(nu * np.pi)
        + 0.5 * logdet_scale
        + 0.5 * (nu + d) * (digamma(0.5 * (nu + d)) - digamma(0.5 * nu))
    )


def gaussian_heat_oracle(cov0, mean0, D, t):
    """Heat flow of a Gaussian: mean is fixed, covariance grows by 2 D t I."""
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
    if np.linalg.eigvalsh(cov0).min() <= 0:
        raise ValueError("initial covariance must be positive definite")
    cov = cov0 + 2.0 * D * t * np.eye(cov0.shape[0]) if t else cov0.copy()
    return np.array(mean0, dtype=float), cov, gaussian_entropy(cov)


def linear_drift_matrix(problem, t=0.0, tol=1e-9):
    """A with drift(x) = A x, read off the problem; refuses affine or nonlinear drifts."""
    d = problem.dim
    rng = np.random.default_rng(0)
    probe = np.vstack([np.zeros(d), np.eye(d), rng.standard_normal((4, d))])
    out = problem.drift(probe, t)
    A = out[1 : d + 1].T - out[0][:, None]
    scale = 1.0 + np.abs(A).max()
    if np.abs(out[0]).max() > tol * scale or np.abs(out[d + 1 :] - probe[d + 1 :] @ A.T).max() > tol * scale:
        raise ValueError("drift is not linear in x")
    return A


def gaussian_linear_oracle(problem, mean0, cov0, t):
    """Exact Gaussian solution for a linear drift and constant diffusion.

    dm/dt = A m and dC/dt = A C + C A^T + 2 D, integrated in closed form with
    Van Loan's block exponential. Returns (mean, cov, entropy).
    """
    A = linear_drift_matrix(problem)
    d = problem.dim
    mean0 = np.asarray(mean0, dtype=float)
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
    if t == 0:
        return mean0.copy(), cov0.copy(), gaussian_entropy(cov0)
    # compose unit sub-intervals: the -A block of the exponential grows like exp(|A| t)
    n_sub = max(1, int(np.ceil(t)))
    h = t / n_sub
    M = np.zeros((2 * d, 2 * d))
    M[:d, :d] = -A
    M[:d, d:] = 2.0 * problem.diffusion
    M[d:, d:] = A.T
    E = scipy.linalg.expm(M * h)
    phi = E[d:, d:].T
    noise = phi @ E[:d, d:]
    mean, cov = mean0, cov0
    for _ in range(n_sub):
        mean = phi @ mean
        cov = phi @ cov @ phi.T + noise
        cov = 0.5 * (cov + cov.T)
    return mean, cov, gaussian_entropy(cov)


@dataclass
class GibbsState:
    cov: np.ndarray
    entropy: float
    sigma2: float  # isotropic variance, nan if anisotropic

    def ball_prob(self, r):
        """P(|x| <= r) for the zero-mean isotropic steady state."""
        if not np.isfinite(self.sigma2):
            raise ValueError("ball probability closed form needs an isotropic steady state")
        if r <= 0:
            return 0.0
        if np.isinf(r):
            return 1.0
        d = self.cov.shape[0]
        return float(gammainc(0.5 * d, 0.5 * r * r / self.sigma2))


def gibbs_oracle(problem):
    """Thermal steady state of the uncoupled damped oscillators at a single temperature."""
    info = problem.info
    if problem.name != "phase_space":
        raise ValueError("gibbs_oracle needs a phase-space problem")
    if info["k"] != 0:
        raise ValueError("closed-form steady state requires k = 0")
    temps = np.asarray(info["temps"])
    if not np.allclose(temps, temps[0]):
        raise ValueError("closed-form steady state requires equal bath temperatures")
    N, m, w, kT = info["n_osc"], info["m"], info["omega"], float(temps[0])
    var_x = kT / (m * w * w)
    var_p = m * kT
    cov = np.diag(np.r_[np.full(N, var_x), np.full(N, var_p)])
    sigma2 = var_x if np.isclose(var_x, var_p) else float("nan")
    return GibbsState(cov, gaussian_entropy(cov), sigma2)


# --- radial heat equation ------------------------------------------------------

RADIAL_SCHEMES = ("explicit_euler", "crank_nicolson")

# central-difference weights at offsets -w..w for p'' (times delta^2) and p' (times delta)
_STENCILS = {
    2: (np.array([1.0, -2.0, 1.0]), np.array([-0.5, 0.0, 0.5])),
    4: (np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12, np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12),
}


@dataclass
class RadialGridConfig:
    delta: float = 4e-3
    r_max: float = 100.0
    lhopital_cells: int = 10
    scheme: str = "crank_nicolson"
    dt_grid: float = 1e-3
    order: int = 4

    def __post_init__(self):
        if self.delta <= 0 or self.r_max <= 0:
            raise ValueError("grid spacing and cutoff must be positive")
        m = self.r_max / self.delta
        if abs(m - round(m)) > 1e-6 * m:
            raise ValueError("r_max must be an integer multiple of delta")
        if self.lhopital_cells < 1:
            raise ValueError("need at least one L'Hopital cell")
        if self.scheme not in RADIAL_SCHEMES:
            raise ValueError(f"scheme must be one of {RADIAL_SCHEMES}")
        if self.order not in _STENCILS:
            raise ValueError(f"order must be one of {sorted(_STENCILS)}")
        if self.dt_grid <= 0:
            raise ValueError("dt_grid must be positive")

    @property
    def n_cells(self):
        return int(round(self.r_max / self.delta))

    def radii(self):
        return (np.arange(self.n_cells) + 0.5) * self.delta


def sphere_surface(d):
    return float(2 * np.pi ** (0.5 * d) / np.exp(gammaln(0.5 * d)))


@dataclass
class RadialProfile:
    """Radially symmetric density on cell centres r_i = (i + 1/2) delta.

    ``boundary`` holds the fixed density values of the ghost cells beyond
    r_max. ``tail_mass``/``tail_entropy`` carry the part of the density outside
    the grid; the solver credits them with the probability flux through r_max.
    """

    p: np.ndarray
    d: int
    delta: float
    t: float = 0.0
    boundary: tuple = (0.0, 0.0)
    tail_mass: float = 0.0
    tail_entropy: float = 0.0

    @property
    def r(self):
        return (np.arange(self.p.size) + 0.5) * self.delta

    @property
    def r_max(self):
        return self.p.size * self.delta

    def _shell(self):
        return sphere_surface(self.d) * self.r ** (self.d - 1) * self.delta

    def mass(self, include_tail=True):
        m = float(np.sum(self.p * self._shell()))
        return m + self.tail_mass if include_tail else m

    def entropy(self, include_tail=True):
        p = self.p
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        s = float(-np.sum(plogp * self._shell()))
        return s + self.tail_entropy if include_tail else s

    def save(self, path):
        b0, b1 = (float(v) for v in self.boundary)
        with open(path, "w") as fh:
            fh.write(
                f"# d={self.d} delta={float(self.delta)!r} r_max={float(self.r_max)!r} t={float(self.t)!r} "
                f"b0={b0!r} b1={b1!r} tail_mass={float(self.tail_mass)!r} tail_entropy={float(self.tail_entropy)!r}\n"
            )
            np.savetxt(fh, self.p, fmt="%.17g")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            head = fh.readline().lstrip("#").split()
        kv = dict(item.split("=") for item in head)
        p = np.loadtxt(path, comments="#")
        return cls(
            p,
            int(kv["d"]),
            float(kv["delta"]),
            float(kv["t"]),
            (float(kv.get("b0", 0.0)), float(kv.get("b1", 0.0))),
            float(kv.get("tail_mass", 0.0)),
            float(kv.get("tail_entropy", 0.0)),
        )


def _log_profile(kind, d, nu):
    if kind == "gaussian":
        return lambda r: -0.5 * d * np.log(2 * np.pi) - 0.5 * r * r
    if kind == "student_t":
        c = gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu) - 0.5 * d * np.log(nu * np.pi)
        return lambda r: c - 0.5 * (nu + d) * np.log1p(r * r / nu)
    raise ValueError(f"unknown profile kind {kind!r}")


def radial_profile(kind, d, config=None, nu=2.0):
    """Initial profile of a standard ``"gaussian"`` or ``"student_t"`` density,
    with the analytic mass and entropy beyond r_max stored as the tail."""
    config = config or RadialGridConfig()
    logp = _log_profile(kind, d, nu)
    R = config.r_max
    omega = sphere_surface(d)
    ghost = R + (np.arange(2) + 0.5) * config.delta
    mass = scipy.integrate.quad(lambda r: omega * r ** (d - 1) * np.exp(logp(r)), R, np.inf)[0]
    ent = scipy.integrate.quad(lambda r: -omega * r ** (d - 1) * np.exp(logp(r)) * logp(r), R, np.inf)[0]
    boundary = tuple(float(v) for v in np.exp(logp(ghost)))
    return RadialProfile(np.exp(logp(config.radii())), d, config.delta, 0.0, boundary, mass, ent)


def _radial_operator(n, d, delta, D, n_lh, order=4, boundary=(0.0, 0.0)):
    """Banded form of D (p'' + (d-1)/r p') on cell centres.

    Returns (bands, source): row i of the operator applied to p is
    sum_k bands[w + k, i] p[i + k] + source[i]. Ghosts below r = 0 mirror the
    interior (p_{-1-j} = p_j); ghosts above r_max take the fixed ``boundary``
    values. The first ``n_lh`` cells use d p'' in place of the singular term.
    """
    d2, d1 = _STENCILS[order]
    w = order // 2
    r = (np.arange(n) + 0.5) * delta
    c1 = (d - 1) / r
    scale2 = np.ones(n)
    scale2[:n_lh] = d
    c1[:n_lh] = 0.0
    bands = np.zeros((2 * w + 1, n))
    source = np.zeros(n)
    rows = np.arange(n)
    for k in range(-w, w + 1):
        coef = D * (scale2 * d2[w + k] / delta**2 + c1 * d1[w + k] / delta)
        j = rows + k
        inside = (j >= 0) & (j < n)
        bands[w + k, inside] += coef[inside]
        for i in rows[j < 0]:
            bands[w + (-1 - j[i]) - i, i] += coef[i]
        for i in rows[j >= n]:
            source[i] += coef[i] * boundary[j[i] - n]
    return bands, source


def _gershgorin_radius(bands):
    return float(np.max(np.sum(np.abs(bands), axis=0)))


def explicit_stable_dt(config, d, D):
    """Largest explicit Euler step: the simple diffusion bound, tightened by a
    Gershgorin bound of the assembled operator (the L'Hopital rows are d times stiffer)."""
    simple = config.delta**2 / (2.0 * D * (1.0 + 0.5 * (d - 1)))
    bands, _ = _radial_operator(config.n_cells, d, config.delta, D, config.lhopital_cells, config.order)
    return min(simple, 2.0 / _gershgorin_radius(bands))


def radial_heat_evolve(profile, D, config, t_end):
    """Evolve a radial profile under dp/dt = D Laplacian p for a time ``t_end``."""
    if D == 0 or t_end == 0:
        return replace(profile, p=profile.p.copy(), t=profile.t + t_end)
    if D < 0 or t_end < 0:
        raise ValueError("D and t_end must be non-negative")
    if not np.isclose(profile.delta, config.delta) or profile.p.size != config.n_cells:
        raise ValueError("profile does not live on the configured grid")
    n, d = profile.p.size, profile.d
    bands, source = _radial_operator(n, d, config.delta, D, config.lhopital_cells, config.order, profile.boundary)
    n_steps = max(1, int(np.ceil(t_end / config.dt_grid - 1e-9)))
    dt = t_end / n_steps
    p = profile.p.copy()
    # flux through r_max: -D * surface * r_max^(d-1) * dp/dr at the outer face
    face = D * sphere_surface(d) * profile.r_max ** (d - 1) / config.delta
    b0 = profile.boundary[0]
    if config.scheme == "explicit_euler":
        limit = explicit_stable_dt(config, d, D)
        if dt > limit:
            raise ValueError(f"explicit scheme unstable: need dt_grid <= {limit:.6e}")
        edge = _explicit_run(p, bands, source, dt, n_steps)
        out_mass = face * dt * (edge - n_steps * b0)
    else:
        w = config.order // 2
        ab = np.zeros_like(bands)
        for k in range(-w, w + 1):
            if k >= 0:
                ab[w - k, k:] = -0.5 * dt * bands[w + k, : n - k]
            else:
                ab[w - k, : n + k] = -0.5 * dt * bands[w + k, -k:]
        ab[w] += 1.0
        edge = 0.0
        for _ in range(n_steps):
            rhs = p + 0.5 * dt * _band_apply(bands, p) + dt * source
            last = p[-1]
            p = scipy.linalg.solve_banded((w, w), ab, rhs, check_finite=False)
            edge += 0.5 * (last + p[-1])
        out_mass = face * dt * (edge - n_steps * b0)
    # the transferred mass leaves the grid at density ~b0: keep total entropy consistent
    log_b = np.log(b0) if b0 > 0 else 0.0
    return RadialProfile(
        p,
        d,
        config.delta,
        profile.t + t_end,
        profile.boundary,
        profile.tail_mass + out_mass,
        profile.tail_entropy - out_mass * (log_b + 1.0),
    )


def _band_apply(bands, p):
    w = bands.shape[0] // 2
    n = p.size
    out = bands[w] * p
    for k in range(1, w + 1):
        out[:-k] += bands[w + k, : n - k] * p[k:]
        out[k:] += bands[w - k, k:] * p[: n - k]
    return out


@optional_njit(cache=True)
def _explicit_run_jit(p, bands, source, dt, n_steps):
    n = p.size
    w = bands.shape[0] // 2
    q = np.empty(n)
    edge = 0.0
    for _ in range(n_steps):
        edge += p[n - 1]
        for i in range(n):
            acc = source[i]
            for k in range(-w, w + 1):
                j = i + k
                if 0 <= j < n:
                    acc += bands[w + k, i] * p[j]
            q[i] = p[i] + dt * acc
        p[:] = q
    return edge


def _explicit_run(p, bands, source, dt, n_steps):
    """In-place explicit Euler; returns the sum of the outermost cell over the steps."""
    if _accel.use_numba():
        return _explicit_run_jit(p, bands, source, dt, n_steps)
    edge = 0.0
    for _ in range(n_steps):
        edge += p[-1]
        p += dt * (_band_apply(bands, p) + source)
    return edge


# --- SDE ensembles ---------------------------------------------------------------


class _ParticleNoise:
    """One independent normal stream per particle, derived from a master seed."""

    def __init__(self, n, width, seed):
        children = np.random.SeedSequence(seed).spawn(n)
        self.gens = [np.random.Generator(np.random.PCG64(c)) for c in children]
        self.width = width

    def draw(self, n_steps):
        out = np.empty((len(self.gens), n_steps, self.width))
        for i, g in enumerate(self.gens):
            out[i] = g.standard_normal((n_steps, self.width))
        return out


@optional_njit(cache=True)
def _ring_sde_chunk(X, noise, dt, m, w2, k, gamma, amp, heun):
    n, steps, N = noise.shape
    sq = np.sqrt(dt)
    fx = np.empty(N)
    fp = np.empty(N)
    gx = np.empty(N)
    gp = np.empty(N)
    xt = np.empty(N)
    pt = np.empty(N)
    for a in range(n):
        x = X[a, :N]
        p = X[a, N:]
        for s in range(steps):
            for i in range(N):
                xl = x[(i - 1) % N]
                xr = x[(i + 1) % N]
                fx[i] = p[i] / m
                fp[i] = -gamma * p[i] - (m * w2 * x[i] + 2.0 * k * (2.0 * x[i] - xl - xr))
            if heun:
                for i in range(N):
                    xt[i] = x[i] + dt * fx[i]
                    pt[i] = p[i] + dt * fp[i] + amp[i] * sq * noise[a, s, i]
                for i in range(N):
                    xl = xt[(i - 1) % N]
                    xr = xt[(i + 1) % N]
                    gx[i] = pt[i] / m
                    gp[i] = -gamma * pt[i] - (m * w2 * xt[i] + 2.0 * k * (2.0 * xt[i] - xl - xr))
                for i in range(N):
                    x[i] += 0.5 * dt * (fx[i] + gx[i])
                    p[i] += 0.5 * dt * (fp[i] + gp[i]) + amp[i] * sq * noise[a, s, i]
            else:
                for i in range(N):
                    x[i] += dt * fx[i]
                    p[i] += dt * fp[i] + amp[i] * sq * noise[a, s, i]


def _ring_sde_chunk_numpy(X, noise, dt, m, w2, k, gamma, amp, heun):
    N = noise.shape[2]
    sq = np.sqrt(dt)

    def f(x, p):
        dHdx = m * w2 * x + 2.0 * k * (2.0 * x - np.roll(x, 1, axis=1) - np.roll(x, -1, axis=1))
        return p / m, -gamma * p - dHdx

    x, p = X[:, :N], X[:, N:]
    for s in range(noise.shape[1]):
        kick = amp * sq * noise[:, s]
        fx, fp = f(x, p)
        if heun:
            gx, gp = f(x + dt * fx, p + dt * fp + kick)
            x += 0.5 * dt * (fx + gx)
            p += 0.5 * dt * (fp + gp) + kick
        else:
            x += dt * fx
            p += dt * fp + kick


def sde_evolve(problem, initial, dt, t_end, seed=0, record_times=None, scheme="euler", chunk=256):
    """Particle ensemble of the phase-space SDE

        dx = dH/dp dt,  dp = -(gamma p + dH/dx) dt + sqrt(2 m gamma k_B T_i) dW.

    ``scheme`` is ``"euler"`` (Euler-Maruyama) or ``"heun"`` (stochastic Heun,
    additive noise). Returns a list of ``(t, ensemble)`` at ``record_times``
    (default: only ``t_end``). Deterministic in ``seed`` and independent of the
    evaluation order because every particle owns its noise stream.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if problem.name != "phase_space":
        raise ValueError("sde_evolve integrates the phase-space problem")
    info = problem.info
    N = info["n_osc"]
    X = np.array(initial, dtype=np.float64, copy=True)
    if X.ndim != 2 or X.shape[1] != 2 * N:
        raise ValueError(f"initial ensemble must have shape (n, {2 * N})")
    m, w, k, gamma = info["m"], info["omega"], info["k"], info["gamma"]
    amp = np.sqrt(2.0 * m * gamma * np.asarray(info["temps"], dtype=float))
    record_times = [t_end] if record_times is None else sorted(record_times)
    marks = {int(round(t / dt)): t for t in record_times}
    total = max(marks)
    noise = _ParticleNoise(len(X), N, seed)
    kernel = _ring_sde_chunk if _accel.use_numba() else _ring_sde_chunk_numpy
    out = []
    if 0 in marks:
        out.append((marks[0], X.copy()))
    done = 0
    while done < total:
        nxt = min([s for s in marks if s > done] + [done + chunk])
        dW = noise.draw(nxt - done)
        kernel(X, dW, dt, m, w * w, k, gamma, amp, scheme == "heun")
        done = nxt
        if done in marks:
            out.append((marks[done], X.copy()))
    return out
