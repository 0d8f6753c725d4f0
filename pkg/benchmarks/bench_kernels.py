"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--n 10000] [--repeat 3]

Each row reports the best of ``--repeat`` wall times per backend after one
warm-up call (which also triggers JIT compilation) and checks that both
backends return the same numbers.
"""
import argparse
import time

import numpy as np

from flowtdvp import _accel
from flowtdvp.differentiation import log_derivatives
from flowtdvp.pde import phase_space_problem
from flowtdvp.reference import RadialGridConfig, radial_heat_evolve, radial_profile, sde_evolve
from flowtdvp.verify import random_model


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n):
    heat = random_model(8, "student_t", "identity_plus_aat", include_t=False, seed=1, scale=0.3)
    ps = random_model(6, "gaussian", "cholesky", include_t=True, seed=2, scale=0.3)
    Xh = heat.sample(n, np.random.default_rng(0))
    Xp = ps.sample(n, np.random.default_rng(0))
    ring = phase_space_problem(3, k=1.0, temps=(10, 3, 1))
    X0 = np.random.default_rng(1).standard_normal((max(n // 10, 10), 6))
    grid = RadialGridConfig(delta=0.02, r_max=20.0, scheme="explicit_euler", dt_grid=1e-5)
    prof = radial_profile("gaussian", 8, grid)

    def derivs(model, X):
        return lambda: log_derivatives(model, X).O

    return [
        (f"flow derivatives d=8, {heat.n_params} params, n={n}", derivs(heat, Xh)),
        (f"flow derivatives d=6, {ps.n_params} params, n={n}", derivs(ps, Xp)),
        (f"ring SDE, {len(X0)} particles x 1000 steps", lambda: sde_evolve(ring, X0, 1e-3, 1.0, seed=0)[-1][1]),
        ("radial explicit Euler, 1000 cells x 500 steps", lambda: radial_heat_evolve(prof, 1.0, grid, 5e-3).p),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    prev = _accel.backend()
    print(f"{'case':<52} {'numba [s]':>10} {'numpy [s]':>10} {'speedup':>8}  max |diff|")
    try:
        for name, fn in cases(args.n):
            _accel.set_backend("numba")
            t_nb, a = best_of(fn, args.repeat)
            _accel.set_backend("numpy")
            t_np, b = best_of(fn, args.repeat)
            diff = float(np.max(np.abs(a - b)))
            print(f"{name:<52} {t_nb:>10.4f} {t_np:>10.4f} {t_np / t_nb:>7.1f}x  {diff:.1e}")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
