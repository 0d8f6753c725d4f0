import numpy as np
import pytest

from flowtdvp.density import CHOLESKY, GAUSSIAN, STUDENT_T, LatentSpec, init_identity, make_blocks
from flowtdvp.observables import (
    ball_probability,
    ball_volume,
    importance_normalization,
    mc_entropy,
    mc_moments,
    nu_observer,
    uniform_in_ball,
)
from flowtdvp.verify import random_model


def _gibbs_model():
    return init_identity(LatentSpec(GAUSSIAN, 6, CHOLESKY), make_blocks(6), 0, cov=10 * np.eye(6))


def test_ball_volume():
    assert ball_volume(6, 1.0) == pytest.approx(5.16771, abs=1e-5)
    assert ball_volume(2, 3.0) == pytest.approx(9 * np.pi)
    assert ball_volume(1, 0.5) == pytest.approx(1.0)


def test_uniform_in_ball(rng):
    X = uniform_in_ball(20_000, 3, 2.0, [1.0, 0, 0], rng, stratified=True)
    r = np.linalg.norm(X - [1.0, 0, 0], axis=1)
    assert r.max() <= 2.0
    assert np.mean(r < 1.0) == pytest.approx(1 / 8, abs=0.01)


def test_entropy_of_gibbs_model(rng):
    s, se = mc_entropy(_gibbs_model(), 10_000, rng)
    assert abs(s - 15.421386) < 3 * se + 1e-12
    with pytest.raises(ValueError):
        mc_entropy(_gibbs_model(), 1, rng)


@pytest.mark.parametrize("stratified", [False, True])
def test_ball_probability_of_gibbs_model(stratified, rng):
    est, se = ball_probability(_gibbs_model(), 10.0, n=10_000, rng=rng, stratified=stratified)
    assert abs(est - 0.875348) < 3 * se


def test_ball_probability_unbiased():
    m = random_model(2, STUDENT_T, seed=1, scale=0.3)
    ests = [ball_probability(m, 1.5, n=2000, rng=np.random.default_rng(s))[0] for s in range(40)]
    X = m.sample(200_000, np.random.default_rng(99))
    truth = np.mean(np.linalg.norm(X, axis=1) <= 1.5)
    assert abs(np.mean(ests) - truth) < 4 * np.std(ests, ddof=1) / np.sqrt(40) + 3 * np.sqrt(truth * (1 - truth) / 2e5)
    with pytest.raises(ValueError):
        ball_probability(m, 0.0)


def test_moments(rng):
    X = rng.normal([1.0, -2.0], [1.0, 3.0], size=(50_000, 2))
    mean, var, mean_se, var_se = mc_moments(X)
    assert np.all(np.abs(mean - [1, -2]) < 4 * mean_se)
    assert np.all(np.abs(var - [1, 9]) < 4 * var_se)
    assert var_se == pytest.approx(np.sqrt(2 / 50_000) * np.array([1, 9]), rel=0.05)
    m = _gibbs_model()
    mean, var, _, _ = mc_moments(m, 5000, rng)
    assert np.allclose(var, 10, rtol=0.1)
    with pytest.raises(ValueError):
        mc_moments(np.ones((1, 2)))


def test_nu_observer():
    t = init_identity(LatentSpec(STUDENT_T, 3), make_blocks(3), 0, nu=2.5)
    assert nu_observer(t) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        nu_observer(_gibbs_model())


@pytest.mark.parametrize("family", [GAUSSIAN, STUDENT_T])
def test_importance_normalization(family, rng):
    m = random_model(4, family, seed=3, scale=0.3)
    est, se = importance_normalization(m, 20_000, rng)
    assert abs(est - 1) < 3 * se and se < 0.05
