import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtdvp.density import (
    CHOLESKY,
    GAUSSIAN,
    IDENTITY_PLUS_AAT,
    STUDENT_T,
    CheckpointError,
    CouplingBlockSpec,
    DensityModel,
    FlowError,
    LatentSpec,
    ParameterLayout,
    init_identity,
    load_checkpoint,
    make_blocks,
    save_checkpoint,
)
from flowtdvp.verify import random_model

LN_2PI = np.log(2 * np.pi)


def identity(d, family=GAUSSIAN, cov=CHOLESKY, include_t=False, **kw):
    return init_identity(LatentSpec(family, d, cov), make_blocks(d, 4, include_t), 0, **kw)


def test_default_parameter_counts():
    heat = identity(8, cov=IDENTITY_PLUS_AAT)
    assert heat.n_params == 392
    assert identity(8, STUDENT_T, IDENTITY_PLUS_AAT, nu=2.0).n_params == 393
    assert identity(6, cov=IDENTITY_PLUS_AAT).n_params == 234
    assert identity(6, cov=CHOLESKY, include_t=True).n_params == 411


def test_layout_covers_vector_disjointly():
    m = identity(6, STUDENT_T, include_t=True, nu=2.0)
    spans = sorted(m.layout.groups.values())
    assert spans[0][0] == 0 and spans[-1][1] == m.n_params
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert "latent.nu_raw" in m.layout
    assert "latent.nu_raw" not in identity(6).layout
    assert "block[3].t2" in m.layout


def test_invalid_specs():
    with pytest.raises(ValueError):
        CouplingBlockSpec((0, 0, 1), 1, 2)
    with pytest.raises(ValueError):
        CouplingBlockSpec((0, 1, 2), 0, 2)
    with pytest.raises(ValueError):
        LatentSpec("cauchy", 3)
    with pytest.raises(ValueError):
        make_blocks(1)


def test_subnet_arity_matches_split():
    for blk in make_blocks(7, 3, include_t=True):
        shapes = dict((name, (i, o)) for name, i, o in blk.net_shapes())
        assert shapes["s1"] == shapes["t1"] == (blk.n_first, 7 - blk.n_first)
        assert shapes["s2"] == shapes["t2"] == (7 - blk.n_first, blk.n_first)


def test_identity_forward_inverse():
    m = identity(2)
    x, ld = m.forward(np.array([[1.0, 2.0]]))
    assert np.array_equal(x, [[1.0, 2.0]]) and ld[0] == 0
    z, ld = m.inverse(np.array([[3.0, -1.0]]))
    assert np.array_equal(z, [[3.0, -1.0]]) and ld[0] == 0


def test_identity_ignores_hidden_randomization(rng):
    m = init_identity(LatentSpec(STUDENT_T, 6), make_blocks(6, 4, True), 7, nu=3.0, hidden_scale=5.0)
    z = rng.standard_normal((50, 6))
    x, ld = m.forward(z)
    assert np.array_equal(x, z) and np.all(ld == 0)


def test_single_block_constant_scale():
    # one block, u1 = coordinate 0; s2 (acting on u1) outputs a constant c
    c = 0.3
    blk = CouplingBlockSpec((0, 1), 1, 1, False)
    m = init_identity(LatentSpec(GAUSSIAN, 2), [blk], 0)
    theta = m.params.copy()
    theta[m.layout["block[0].s2"].stop - 1] = c  # output bias of s2
    m = m.with_params(theta)
    x, ld = m.forward(np.array([[1.0, 1.0]]))
    s = 5.0 * np.tanh(c / 5.0)
    assert x[0, 0] == pytest.approx(np.exp(s))
    assert x[0, 1] == pytest.approx(1.0)  # s1 is still zero
    assert ld[0] == pytest.approx(s)


def test_logdet_composes_over_blocks(rng):
    m = random_model(4, seed=3, scale=0.5)
    z = rng.standard_normal((10, 4))
    first = DensityModel(m.latent, m.blocks[:2], np.r_[m.params[: m.layout.n_latent], _block_params(m, range(2))])
    rest = DensityModel(m.latent, m.blocks[2:], np.r_[m.params[: m.layout.n_latent], _block_params(m, range(2, 4))])
    y, l1 = first.forward(z)
    x, l2 = rest.forward(y)
    xf, lf = m.forward(z)
    assert np.allclose(x, xf, atol=1e-12) and np.allclose(l1 + l2, lf, atol=1e-12)


def _block_params(m, idx):
    parts = []
    for b in idx:
        for name, _, _ in m.blocks[b].net_shapes():
            parts.append(m.params[m.layout[f"block[{b}].{name}"]])
    return np.concatenate(parts)


@pytest.mark.parametrize("d", [2, 3, 5, 8])
def test_round_trip_random_params(d, rng):
    m = random_model(d, STUDENT_T, IDENTITY_PLUS_AAT, seed=d)
    z = rng.standard_normal((1000, d))
    x, lf = m.forward(z)
    z2, li = m.inverse(x)
    assert np.max(np.abs(z2 - z)) < 1e-9
    assert np.max(np.abs(lf + li)) < 1e-9


@pytest.mark.parametrize("d", [2, 3, 4])
def test_logdet_matches_numerical_jacobian(d, rng):
    m = random_model(d, seed=11 + d)
    eps = 1e-6
    for z in rng.standard_normal((5, d)):
        J = np.empty((d, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = eps
            J[:, i] = (m.forward(z + e)[0] - m.forward(z - e)[0]) / (2 * eps)
        assert abs(m.forward(z[None])[1][0] - np.linalg.slogdet(J)[1]) < 1e-5


def test_latent_consistency(rng):
    m = random_model(5, STUDENT_T, seed=4)
    z = rng.standard_normal((200, 5))
    x, ld = m.forward(z)
    assert np.allclose(m.log_prob(x) + ld, m.latent_log_prob(z), rtol=0, atol=1e-10)


def test_latent_closed_forms():
    t = identity(8, STUDENT_T, nu=2.0)
    assert t.log_prob(np.zeros(8)) == pytest.approx(np.log(24) - 4 * LN_2PI, abs=1e-12)
    assert t.log_prob(np.zeros(8)) == pytest.approx(-4.17346, abs=1e-5)
    g = identity(8)
    assert g.log_prob(np.zeros(8)) == pytest.approx(-7.35151, abs=1e-5)
    g2 = identity(2)
    assert g2.log_prob(np.zeros(2)) == pytest.approx(-1.837877, abs=1e-6)
    assert g2.log_prob(np.array([1.0, 0.0])) == pytest.approx(-2.337877, abs=1e-6)


def test_student_t_gaussian_limit():
    x = np.r_[1.0, np.zeros(7)]
    t = identity(8, STUDENT_T, nu=1e6)
    assert abs(t.log_prob(x) - identity(8).log_prob(x)) < 1e-4


@pytest.mark.parametrize("cov", [CHOLESKY, IDENTITY_PLUS_AAT])
def test_latent_encodes_requested_moments(cov):
    C = np.array([[2.0, 0.3, 0.0], [0.3, 1.5, 0.2], [0.0, 0.2, 1.2]])
    mu = np.array([1.0, -2.0, 0.5])
    m = init_identity(LatentSpec(GAUSSIAN, 3, cov), make_blocks(3), 0, mean=mu, cov=C)
    st = m.latent_state()
    assert np.allclose(st.mu, mu) and np.allclose(st.cov, C)
    assert np.allclose(st.cov, st.cov.T) and np.linalg.eigvalsh(st.cov).min() > 0


def test_sampling_moments_and_heavy_tails(rng):
    g = identity(3, mean=np.array([1.0, 0.0, -1.0]))
    X = g.sample(10_000, rng)
    assert np.all(np.abs(X.mean(0) - [1, 0, -1]) < 4 / np.sqrt(10_000))
    t = identity(3, STUDENT_T, nu=2.0)
    Y = t.sample(10_000, rng)
    assert np.all(np.abs(np.median(Y, 0)) < 0.05)
    kurt = np.mean(Y[:, 0] ** 4) / np.mean(Y[:, 0] ** 2) ** 2
    assert kurt > 3
    with pytest.raises(ValueError):
        g.sample(0, rng)


def test_sample_inverse_recovers_latent(rng):
    m = random_model(4, seed=5, scale=0.5)
    X = m.sample(20_000, rng)
    z, _ = m.inverse(X)
    st = m.latent_state()
    assert np.all(np.abs(z.mean(0) - st.mu) < 5 * np.sqrt(np.diag(st.cov) / len(z)))
    assert np.allclose(np.cov(z.T), st.cov, rtol=0.08, atol=0.05)


def test_nonfinite_parameters_rejected():
    m = identity(2)
    theta = m.params.copy()
    theta[0] = np.nan
    with pytest.raises(FlowError):
        m.with_params(theta)


def test_overflow_reported(rng):
    m = random_model(4, seed=1)
    theta = m.params.copy()
    # the clamp bounds exp(s), but runaway shift nets still overflow to inf
    theta[m.layout.n_latent :] *= 1.7e308
    with pytest.raises(FlowError):
        m.with_params(theta).forward(rng.standard_normal((4, 4)))


def test_checkpoint_round_trip_and_corruption(tmp_path):
    m = random_model(4, STUDENT_T, IDENTITY_PLUS_AAT, seed=2)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, m, 1.5, extra={"note": "x"})
    m2, t, header = load_checkpoint(path)
    assert np.array_equal(m2.params, m.params) and t == 1.5 and header["extra"] == {"note": "x"}
    assert m2.blocks == m.blocks and m2.latent == m.latent
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_layout_json_is_stable():
    lay = ParameterLayout(LatentSpec(STUDENT_T, 4), make_blocks(4, 2, True))
    assert lay.to_json() == ParameterLayout(LatentSpec(STUDENT_T, 4), make_blocks(4, 2, True)).to_json()


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.booleans())
def test_round_trip_property(d, seed, include_t):
    rng = np.random.default_rng(seed)
    m = init_identity(LatentSpec(GAUSSIAN, d), make_blocks(d, 3, include_t, seed=seed), seed)
    m = m.with_params(rng.uniform(-1, 1, m.n_params))
    z = rng.standard_normal((64, d)) * 3
    x, lf = m.forward(z)
    z2, li = m.inverse(x)
    assert np.max(np.abs(z2 - z)) < 1e-9
    assert np.max(np.abs(lf + li)) < 1e-9
