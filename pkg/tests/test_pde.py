import numpy as np
import pytest

from flowtdvp.density import GAUSSIAN, STUDENT_T, LatentSpec, init_identity, make_blocks
from flowtdvp.pde import (
    FokkerPlanckProblem,
    dt_log_prob,
    hamiltonian,
    hamiltonian_grad,
    heat_problem,
    phase_space_problem,
)
from flowtdvp.verify import random_model


def test_heat_examples():
    m = init_identity(LatentSpec(GAUSSIAN, 8), make_blocks(8), 0)
    pr = heat_problem(8)
    assert dt_log_prob(pr, m, np.zeros(8)) == pytest.approx(-8)
    assert dt_log_prob(pr, m, np.ones(8)) == pytest.approx(0, abs=1e-12)


def _fd_dt_p(problem, model, x, eps=1e-4):
    """d_t p from the non-log form -div(mu p) + sum D_ij d_i d_j p, by finite differences."""
    d = x.size
    p = lambda y: np.exp(model.log_prob(np.atleast_2d(y)))[0]
    flux = lambda y: problem.drift(np.atleast_2d(y), 0.0)[0] * p(y)
    E = np.eye(d) * eps
    div = sum((flux(x + E[i])[i] - flux(x - E[i])[i]) / (2 * eps) for i in range(d))
    lap = 0.0
    D = problem.diffusion
    for i in range(d):
        for j in range(d):
            if D[i, j] == 0:
                continue
            hij = (p(x + E[i] + E[j]) - p(x + E[i] - E[j]) - p(x - E[i] + E[j]) + p(x - E[i] - E[j])) / (4 * eps**2)
            lap += D[i, j] * hij
    return (-div + lap) / p(x)


@pytest.mark.parametrize("kind", ["heat", "phase"])
def test_log_form_matches_direct_form(kind, rng):
    if kind == "heat":
        pr, m = heat_problem(3, D=0.7), random_model(3, STUDENT_T, seed=1, scale=0.3)
    else:
        pr, m = phase_space_problem(2, k=0.5, gamma=0.8, temps=(2.0, 1.0)), random_model(4, seed=2, scale=0.3)
    for x in rng.standard_normal((3, pr.dim)) * 0.7:
        a = dt_log_prob(pr, m, x)
        b = _fd_dt_p(pr, m, x)
        assert a == pytest.approx(b, rel=1e-5, abs=1e-6)


def test_probability_conservation(rng):
    m = random_model(6, seed=3, scale=0.3)
    pr = phase_space_problem(3, k=1.0, temps=(10, 3, 1))
    X = m.sample(20_000, rng)
    f = dt_log_prob(pr, m, X)
    assert abs(f.mean()) < 4 * f.std() / np.sqrt(len(f))


def test_hamiltonian_values():
    pr0 = phase_space_problem(3, k=0.0)
    assert hamiltonian(pr0, [1, 0, 0], [0, 1, 0]) == pytest.approx(1.0)
    pr1 = phase_space_problem(3, k=1.0)
    assert hamiltonian(pr1, [1, 0, 0], [0, 0, 0]) == pytest.approx(2.5)
    p = np.array([0.3, -1.0, 2.0])
    assert np.allclose(hamiltonian_grad(pr1, [0.1, 0.2, 0.3], p)[1], p)


def test_hamiltonian_gradient_fd(rng):
    pr = phase_space_problem(4, m=1.3, omega=0.7, k=0.9, temps=(1, 1, 1, 1))
    x, p = rng.standard_normal(4), rng.standard_normal(4)
    gx, gp = hamiltonian_grad(pr, x, p)
    eps = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = eps
        assert gx[i] == pytest.approx((hamiltonian(pr, x + e, p) - hamiltonian(pr, x - e, p)) / (2 * eps), abs=1e-8)
        assert gp[i] == pytest.approx((hamiltonian(pr, x, p + e) - hamiltonian(pr, x, p - e)) / (2 * eps), abs=1e-8)


def test_phase_space_structure(rng):
    pr = phase_space_problem(3, m=2.0, gamma=0.5, k=1.0, temps=(10, 3, 1))
    assert np.allclose(pr.diffusion, np.diag([0, 0, 0, 10.0, 3.0, 1.0]))
    X = rng.standard_normal((20, 6))
    assert pr.check_divergence(X) < 1e-6
    assert np.allclose(pr.drift_divergence(X, 0.0), -1.5)


def test_liouville_limit(rng):
    pr = phase_space_problem(3, gamma=0.0, temps=(0, 0, 0))
    m = random_model(6, seed=5, scale=0.3)
    x = rng.standard_normal(6)
    from flowtdvp.differentiation import spatial_derivatives

    g, _ = spatial_derivatives(m, x)
    assert dt_log_prob(pr, m, x) == pytest.approx(-pr.drift(x[None], 0)[0] @ g, rel=1e-12)


def test_invalid_problems():
    with pytest.raises(ValueError):
        FokkerPlanckProblem(2, lambda X, t: X, lambda X, t: 0, np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        FokkerPlanckProblem(2, lambda X, t: X, lambda X, t: 0, -np.eye(2))
    with pytest.raises(ValueError):
        phase_space_problem(3, temps=(1, 2))
    with pytest.raises(ValueError):
        heat_problem(2, D=-1)
    with pytest.raises(ValueError):
        phase_space_problem(1, gamma=-1.0, temps=(1.0,))
