"""Invariant battery behind ``flowtdvp verify``: quick, seeded, reduced-n checks."""
import tempfile
from pathlib import Path

import numpy as np

from . import _accel
from .density import (
    CHOLESKY,
    GAUSSIAN,
    IDENTITY_PLUS_AAT,
    STUDENT_T,
    CheckpointError,
    LatentSpec,
    init_identity,
    load_checkpoint,
    make_blocks,
    save_checkpoint,
)
from .differentiation import fd_param_grad, fd_spatial, log_derivatives, param_grad_log_prob, spatial_derivatives
from .integrator import IntegratorConfig, run_to
from .observables import ball_volume, importance_normalization, mc_entropy
from .pde import heat_problem
from .reference import RadialGridConfig, gaussian_heat_oracle, radial_profile, student_t_entropy


def random_model(d, family=GAUSSIAN, covariance=CHOLESKY, include_t=True, seed=0, scale=1.0):
    """Flow with every parameter drawn uniformly from [-scale, scale]."""
    rng = np.random.default_rng(seed)
    latent = LatentSpec(family, d, covariance)
    blocks = make_blocks(d, 4, include_t, seed=seed)
    model = init_identity(latent, blocks, seed, nu=2.0 if family == STUDENT_T else None)
    return model.with_params(rng.uniform(-scale, scale, model.n_params))


def _fd_jacobian(model, z, eps=1e-6):
    d = z.size
    J = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        J[:, i] = (model.forward(z + e)[0] - model.forward(z - e)[0]) / (2 * eps)
    return J


def check_round_trip(seed):
    worst = 0.0
    for d in (2, 4, 8):
        m = random_model(d, seed=seed + d)
        z = np.random.default_rng(seed).standard_normal((1000, d))
        x, _ = m.forward(z)
        worst = max(worst, float(np.max(np.abs(m.inverse(x)[0] - z))))
    return worst < 1e-9, f"max |inverse(forward(z)) - z| = {worst:.2e}"


def check_logdet(seed):
    worst = 0.0
    for d in (2, 3, 4):
        m = random_model(d, seed=seed + d)
        for z in np.random.default_rng(seed).standard_normal((5, d)):
            ld = float(m.forward(z[None])[1][0])
            worst = max(worst, abs(ld - np.linalg.slogdet(_fd_jacobian(m, z))[1]))
    return worst < 1e-5, f"max logdet deviation {worst:.2e}"


def check_identity(seed):
    m = init_identity(LatentSpec(STUDENT_T, 6, IDENTITY_PLUS_AAT), make_blocks(6, 4, True, seed=seed), seed, nu=2.0)
    z = np.random.default_rng(seed).standard_normal((100, 6))
    x, ld = m.forward(z)
    ok = np.array_equal(x, z) and np.all(ld == 0)
    return ok, "forward is the exact identity" if ok else "identity initialization leaks"


def check_param_grad(seed):
    bad = 0
    for d, fam, cov in ((2, STUDENT_T, CHOLESKY), (4, GAUSSIAN, IDENTITY_PLUS_AAT), (3, STUDENT_T, IDENTITY_PLUS_AAT)):
        m = random_model(d, fam, cov, seed=seed + d, scale=0.5)
        x = np.random.default_rng(seed).standard_normal(d)
        bad += int(np.sum(~np.isclose(param_grad_log_prob(m, x), fd_param_grad(m, x), rtol=1e-5, atol=1e-8)))
    return bad == 0, f"{bad} components outside rtol 1e-5 / atol 1e-8"


def check_spatial(seed):
    worst = 0.0
    for d in (2, 3, 4):
        m = random_model(d, STUDENT_T, seed=seed + d, scale=0.5)
        x = np.random.default_rng(seed).standard_normal(d)
        g, h = spatial_derivatives(m, x)
        gf, hf = fd_spatial(m, x)
        worst = max(worst, float(np.max(np.abs(g - gf) / (1e-2 + np.abs(gf)))), float(np.max(np.abs(h - hf) / (1e-2 + np.abs(hf)))))
    return worst < 1e-4, f"max relative deviation {worst:.2e}"


def check_score_mean(seed):
    m = random_model(4, STUDENT_T, seed=seed, scale=0.5)
    X = m.sample(10_000, np.random.default_rng(seed))
    O = log_derivatives(m, X, spatial=False).O
    z = np.abs(O.mean(0)) / (O.std(0, ddof=1) / np.sqrt(len(O)) + 1e-300)
    return bool(np.all(z < 4.5)), f"max |<O_k>| / se = {z.max():.2f} over {O.shape[1]} parameters"


def check_backends(seed):
    if not _accel.HAVE_NUMBA:
        return True, "numba unavailable; numpy path only"
    m = random_model(6, STUDENT_T, seed=seed, scale=0.5)
    X = m.sample(200, np.random.default_rng(seed))
    prev = _accel.set_backend("numba")
    try:
        a = log_derivatives(m, X)
        _accel.set_backend("numpy")
        b = log_derivatives(m, X)
    finally:
        _accel.set_backend(prev)
    dev = max(float(np.max(np.abs(a.O - b.O))), float(np.max(np.abs(a.hess_x - b.hess_x))))
    return dev < 1e-10, f"numba vs numpy max deviation {dev:.1e}"


def check_latent_values(seed):
    t = init_identity(LatentSpec(STUDENT_T, 8), make_blocks(8, 4), seed, nu=2.0)
    g = init_identity(LatentSpec(GAUSSIAN, 8), make_blocks(8, 4), seed)
    a = float(t.log_prob(np.zeros(8)))
    b = float(g.log_prob(np.zeros(8)))
    ok = abs(a - (np.log(24) - 4 * np.log(2 * np.pi))) < 1e-12 and abs(b + 4 * np.log(2 * np.pi)) < 1e-12
    return ok, f"log p(0): student-t {a:.5f}, gaussian {b:.5f}"


def check_entropy(seed):
    m = init_identity(LatentSpec(GAUSSIAN, 8), make_blocks(8, 4), seed)
    est, se = mc_entropy(m, 10_000, np.random.default_rng(seed))
    exact = 4 * (1 + np.log(2 * np.pi))
    return abs(est - exact) < 3 * se, f"{est:.4f} +- {se:.4f} vs {exact:.4f}"


def check_normalization(seed):
    m = random_model(4, STUDENT_T, seed=seed, scale=0.3)
    est, se = importance_normalization(m, 20_000, np.random.default_rng(seed))
    return abs(est - 1) < 3 * se, f"integral of p = {est:.4f} +- {se:.4f}"


def check_heat_oracle(seed):
    m = init_identity(LatentSpec(GAUSSIAN, 2, CHOLESKY), make_blocks(2, 4), seed)
    cfg = IntegratorConfig(dt=1e-3, t_end=0.05, n_samples=2000, seed=seed, observe_every=1000, trainable=("latent.",))
    m2, _ = run_to(m, heat_problem(2), cfg)
    cov = m2.latent_state().cov
    exact = gaussian_heat_oracle(np.eye(2), np.zeros(2), 1.0, 0.05)[1]
    err = float(np.max(np.abs(cov - exact)))
    return err < 1e-4, f"latent covariance error {err:.1e} at t=0.05"


def check_grid(seed):
    p = radial_profile("gaussian", 8, RadialGridConfig())
    s, mass = p.entropy(), p.mass()
    ok = abs(s - 4 * (1 + np.log(2 * np.pi))) < 1e-3 and abs(mass - 1) < 1e-6
    u = radial_profile("student_t", 8, RadialGridConfig(delta=2e-2))
    ok &= abs(u.entropy() - student_t_entropy(8, 2.0)) < 1e-3
    return bool(ok), f"gaussian entropy {s:.5f}, mass {mass:.8f}; student-t entropy {u.entropy():.5f}"


def check_ball_volume(seed):
    v = ball_volume(6, 1.0)
    return abs(v - np.pi**3 / 6) < 1e-12, f"V_6(1) = {v:.6f}"


def check_checkpoint(seed):
    m = random_model(4, STUDENT_T, seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(path, m, 0.25)
        m2, t, _ = load_checkpoint(path)
        same = np.array_equal(m2.params, m.params) and t == 0.25
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        try:
            load_checkpoint(path)
            caught = False
        except CheckpointError:
            caught = True
    return same and caught, f"round trip {'ok' if same else 'broken'}, corruption {'detected' if caught else 'missed'}"


def check_determinism(seed):
    def once():
        m = init_identity(LatentSpec(STUDENT_T, 4), make_blocks(4, 4), seed, nu=2.0)
        cfg = IntegratorConfig(dt=0.01, t_end=0.03, n_samples=500, seed=seed)
        return run_to(m, heat_problem(4), cfg)[0].params

    a, b = once(), once()
    return np.array_equal(a, b), "seeded runs bit-identical" if np.array_equal(a, b) else "seeded runs differ"


CHECKS = [
    ("flow round trip", check_round_trip),
    ("logdet vs finite-difference Jacobian", check_logdet),
    ("identity initialization", check_identity),
    ("parameter scores vs finite differences", check_param_grad),
    ("spatial derivatives vs finite differences", check_spatial),
    ("score expectation vanishes", check_score_mean),
    ("numba and numpy kernels agree", check_backends),
    ("latent log-density closed forms", check_latent_values),
    ("entropy estimator vs closed form", check_entropy),
    ("importance-sampled normalization", check_normalization),
    ("short heat run vs Gaussian oracle", check_heat_oracle),
    ("radial grid initial profiles", check_grid),
    ("ball volume", check_ball_volume),
    ("checkpoint round trip and corruption", check_checkpoint),
    ("determinism", check_determinism),
]


def run_checks(seed=0, checkpoints=(), out=print):
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    for path in checkpoints:
        try:
            model, t, _ = load_checkpoint(path)
            out(f"PASS  checkpoint {path}: {model.n_params} parameters at t={t:g}")
        except (OSError, CheckpointError) as exc:
            ok_all = False
            out(f"FAIL  checkpoint {path}: {exc}")
    return ok_all
