"""Explicit time stepping of the flow parameters.

Each stage draws a fresh batch from the current model, evaluates d_t log p
from the PDE, assembles S and F and solves for theta_dot. Heun (default)
averages the velocities at theta and at the Euler predictor.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import FlowError, save_checkpoint
from .differentiation import log_derivatives
from .pde import dt_log_from_derivs
from .tdvp import RegularizationPolicy, assemble, residual, solve, spectrum_summary

log = logging.getLogger(__name__)

SCHEMES = ("euler", "heun")


class NumericalAbort(RuntimeError):
    """Integration stopped on a non-finite update; ``model``/``t`` are the last good state."""

    def __init__(self, msg, model=None, t=None, checkpoint=None):
        super().__init__(msg)
        self.model = model
        self.t = t
        self.checkpoint = checkpoint


@dataclass
class IntegratorConfig:
    scheme: str = "heun"
    dt: float = 1e-3
    t_end: float = 1.0
    n_samples: int = 10_000
    seed: int = 0
    adaptive: bool = False
    tol: float = 1e-3
    dt_min: float = 1e-6
    shared_samples: bool = False
    observe_every: int = 1
    checkpoint_every: int = 0
    trainable: tuple = ()  # parameter-group prefixes; empty means all
    regularization: RegularizationPolicy = field(default_factory=RegularizationPolicy)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.dt <= 0 and not (self.dt == 0 and self.t_end == 0):
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be non-negative")
        if self.n_samples < 2:
            raise ValueError("need at least two samples per stage")


def trainable_mask(model, prefixes):
    if not prefixes:
        return np.ones(model.n_params, dtype=bool)
    mask = np.zeros(model.n_params, dtype=bool)
    for name, (a, b) in model.layout.groups.items():
        if any(name.startswith(p) for p in prefixes):
            mask[a:b] = True
    if not mask.any():
        raise ValueError(f"no parameter group matches {prefixes}")
    return mask


def stage_rng(seed, step, stage):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step, stage)))


def parameter_velocity(model, problem, t, rng, n_samples, policy=None, mask=None):
    """theta_dot at the current parameters plus per-stage diagnostics."""
    X = model.sample(n_samples, rng)
    ld = log_derivatives(model, X)
    dlog = dt_log_from_derivs(problem, X, t, ld.grad_x, ld.hess_x)
    O = ld.O if mask is None else ld.O[:, mask]
    system = assemble(O, dlog)
    sub = solve(system, policy)
    res = residual(system, sub, np.exp(ld.logp))
    if mask is None:
        theta_dot = sub
    else:
        theta_dot = np.zeros(model.n_params)
        theta_dot[mask] = sub
    diag = {"residual": res.r, "residual_normalized": res.r_normalized, "theta_dot_norm": float(np.linalg.norm(sub))}
    diag.update(spectrum_summary(system))
    diag["eigvals"] = system.eigvals
    return theta_dot, diag


def advance(theta, t, dt, rate, scheme="heun"):
    """One explicit step for a generic rate(theta, t, stage) -> (theta_dot, diag)."""
    k1, diag = rate(theta, t, 0)
    if scheme == "euler" or dt == 0:
        return theta + dt * k1, diag
    k2, _ = rate(theta + dt * k1, t + dt, 1)
    return theta + 0.5 * dt * (k1 + k2), diag


def step(model, problem, config, t, step_index=0, dt=None):
    """Advance ``model`` from t to t + dt. Returns (new model, diagnostics)."""
    dt = config.dt if dt is None else dt
    if dt == 0:
        return model, {}
    mask = trainable_mask(model, config.trainable)

    def rate(theta, tt, stage):
        m = model if stage == 0 else model.with_params(theta)
        rng = stage_rng(config.seed, step_index, 0 if config.shared_samples else stage)
        return parameter_velocity(m, problem, tt, rng, config.n_samples, config.regularization, mask)

    try:
        theta, diag = advance(model.params, t, dt, rate, config.scheme)
        new = model.with_params(theta)
    except (FlowError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise NumericalAbort(f"integration failed at t={t:.6g}: {exc}", model, t) from exc
    return new, diag


def _adaptive_step(model, problem, config, t, step_index, dt):
    full, diag = step(model, problem, config, t, step_index, dt)
    half, _ = step(model, problem, config, t, step_index, dt / 2)
    half2, _ = step(half, problem, config, t + dt / 2, step_index + 1_000_000, dt / 2)
    err = float(np.sqrt(np.mean((full.params - half2.params) ** 2)))
    return half2, diag, err


class Evolution:
    """Iterate over records, one per output time starting with t = 0.

    Observers are callables ``obs(model, t) -> dict`` whose columns are merged
    into each record. ``self.model``/``self.t`` always hold the latest state.
    Deterministic for a fixed ``config.seed``.
    """

    def __init__(self, model, problem, config, observers=(), checkpoint_dir=None):
        self.model = model
        self.problem = problem
        self.config = config
        self.observers = list(observers)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.t = 0.0
        self.n_steps = 0
        self.last_diag = {}

    def _record(self, diag):
        row = {"t": self.t}
        for obs in self.observers:
            row.update(obs(self.model, self.t))
        row["residual_normalized"] = diag.get("residual_normalized", float("nan"))
        row["n_retained"] = diag.get("n_retained", -1)
        row["theta_dot_norm"] = diag.get("theta_dot_norm", float("nan"))
        row["wall_time"] = time.perf_counter() - self._wall0
        return row

    def __iter__(self):
        cfg = self.config
        self._wall0 = time.perf_counter()
        yield self._record({})
        if cfg.t_end <= 0:
            self._final_checkpoint()
            return
        dt = cfg.dt
        n_fixed = int(np.ceil(cfg.t_end / dt - 1e-9))
        i = 0
        while self.t < cfg.t_end - 1e-12:
            h = min(dt, cfg.t_end - self.t)
            try:
                if cfg.adaptive:
                    new, diag, err = _adaptive_step(self.model, self.problem, cfg, self.t, i, h)
                    if err > cfg.tol and h > cfg.dt_min:
                        dt = max(cfg.dt_min, h * max(0.2, 0.9 * (cfg.tol / err) ** (1 / 3)))
                        continue
                    if err > 0:
                        dt = min(4 * cfg.dt, h * min(2.0, 0.9 * (cfg.tol / err) ** (1 / 3)))
                    t_new = self.t + h
                else:
                    new, diag = step(self.model, self.problem, cfg, self.t, i, h)
                    t_new = cfg.t_end if i + 1 >= n_fixed else (i + 1) * cfg.dt
            except NumericalAbort as exc:
                if self.checkpoint_dir is not None:
                    exc.checkpoint = self.checkpoint_dir / "abort.ckpt"
                    save_checkpoint(exc.checkpoint, self.model, self.t)
                raise
            self.model, self.t = new, t_new
            self.last_diag = diag
            i += 1
            self.n_steps = i
            log.info("t=%.6g residual=%.3e dt=%.3g", self.t, diag.get("residual_normalized", float("nan")), h)
            if self.checkpoint_dir is not None and cfg.checkpoint_every and i % cfg.checkpoint_every == 0:
                save_checkpoint(self.checkpoint_dir / f"step{i:07d}.ckpt", self.model, self.t)
            if i % cfg.observe_every == 0 or self.t >= cfg.t_end - 1e-12:
                yield self._record(diag)
        self._final_checkpoint()

    def _final_checkpoint(self):
        if self.checkpoint_dir is not None:
            save_checkpoint(self.checkpoint_dir / "final.ckpt", self.model, self.t)


def evolve(model, problem, config, observers=(), checkpoint_dir=None):
    """Generator of records; see :class:`Evolution`."""
    return iter(Evolution(model, problem, config, observers, checkpoint_dir))


def run_to(model, problem, config, observers=(), checkpoint_dir=None):
    """Run to ``config.t_end``; returns (final model, list of records)."""
    ev = Evolution(model, problem, config, observers, checkpoint_dir)
    records = list(ev)
    return ev.model, records
