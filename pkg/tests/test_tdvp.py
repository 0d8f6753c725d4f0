import warnings

import numpy as np
import pytest
from scipy.optimize import minimize

from flowtdvp.density import GAUSSIAN, LatentSpec, init_identity, make_blocks
from flowtdvp.differentiation import log_derivatives
from flowtdvp.tdvp import RegularizationPolicy, StationarityWarning, TdvpSystem, assemble, residual, solve


def _system(S, F):
    return TdvpSystem(np.asarray(S, float), np.asarray(F, float), 0, np.zeros((0, len(F))), np.zeros(0))


def test_two_sample_correlator():
    sys_ = assemble(np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]))
    assert np.allclose(sys_.S, [[1.0]]) and np.allclose(sys_.F, [1.0])


def test_constant_column_drops_out(rng):
    O = rng.standard_normal((50, 3))
    O[:, 1] = 2.5
    sys_ = assemble(O, rng.standard_normal(50))
    assert np.allclose(sys_.S[1], 0) and np.allclose(sys_.S[:, 1], 0) and sys_.F[1] == pytest.approx(0)


def test_centering_invariance(rng):
    O, f = rng.standard_normal((40, 4)), rng.standard_normal(40)
    a = assemble(O, f)
    b = assemble(O + np.array([0.0, 3.0, 0.0, -1.0]), f + 7.0)
    assert np.allclose(a.S, b.S) and np.allclose(a.F, b.F)


def test_needs_two_samples():
    with pytest.raises(ValueError):
        assemble(np.ones((1, 2)), np.ones(1))


def test_gaussian_fisher_is_identity(rng):
    m = init_identity(LatentSpec(GAUSSIAN, 3), make_blocks(3), 0)
    X = m.sample(10_000, rng)
    O = log_derivatives(m, X, spatial=False).O[:, m.layout["latent.mu"]]
    S = assemble(O, np.zeros(len(X))).S
    assert np.max(np.abs(S - np.eye(3))) < 5 / np.sqrt(len(X))


def test_solve_examples(rng):
    F = rng.standard_normal(4)
    assert np.allclose(solve(_system(np.eye(4), F)), F)
    td = solve(_system(np.diag([1.0, 1e-20]), [1.0, 1.0]), RegularizationPolicy(1e-8))
    assert np.allclose(td, [1.0, 0.0])


def test_solve_matches_dense_solver(rng):
    A = rng.standard_normal((6, 6))
    S = A @ A.T + 6 * np.eye(6)
    F = rng.standard_normal(6)
    td = solve(_system(S, F))
    assert np.max(np.abs(td - np.linalg.solve(S, F)) / np.abs(np.linalg.solve(S, F))) < 1e-8


def test_tikhonov_shift(rng):
    S = np.diag([2.0, 1.0])
    td = solve(_system(S, [1.0, 1.0]), RegularizationPolicy(0.0, 1.0))
    assert np.allclose(td, [1 / 3, 1 / 2])


def test_zero_fisher_warns():
    with pytest.warns(StationarityWarning):
        td = solve(_system(np.zeros((3, 3)), [1.0, 2.0, 3.0]))
    assert np.all(td == 0)


@pytest.mark.parametrize("K", [2, 3, 5])
def test_solution_minimizes_quadratic_form(K, rng):
    A = rng.standard_normal((K, K - 1))
    S = A @ A.T  # rank deficient
    F = S @ rng.standard_normal(K)
    td = solve(_system(S, F))
    q = lambda v: v @ S @ v - 2 * F @ v
    best = minimize(q, np.zeros(K), jac=lambda v: 2 * (S @ v - F), method="BFGS", options={"gtol": 1e-12})
    assert q(td) <= best.fun + 1e-9


def test_rescaling_invariance(rng):
    O, f = rng.standard_normal((200, 3)), rng.standard_normal(200)
    a = assemble(O, f)
    Oc = O.copy()
    Oc[:, 1] *= 7.0
    b = assemble(Oc, f)
    assert np.allclose(O @ solve(a), Oc @ solve(b), atol=1e-10)


def test_residual_examples():
    s = assemble(np.array([[2.0], [0.0]]), np.array([4.0, 0.0]))
    rep = residual(s, np.zeros(1), np.ones(2))
    assert rep.r == pytest.approx(8.0) and rep.r_normalized == pytest.approx(1.0)
    single = TdvpSystem(np.zeros((1, 1)), np.zeros(1), 1, np.array([[2.0]]), np.array([4.0]))
    assert residual(single, np.array([2.0]), np.array([1.0])).r == 0.0


def test_psd_up_to_roundoff(rng):
    O = rng.standard_normal((30, 50))  # fewer samples than parameters
    S = assemble(O, rng.standard_normal(30)).S
    lam = np.linalg.eigvalsh(S)
    assert lam.min() >= -1e-10 * lam.max()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.all(np.isfinite(solve(assemble(O, rng.standard_normal(30)))))
