"""Normalizing-flow density model: a trainable latent distribution pushed
through a stack of affine coupling blocks.

All parameters live in one flat float64 vector. :class:`ParameterLayout`
records which slice belongs to which named group so that the TDVP engine can
treat the model as a plain point in R^K.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

GAUSSIAN = "gaussian"
STUDENT_T = "student_t"
CHOLESKY = "cholesky"
IDENTITY_PLUS_AAT = "identity_plus_aat"

LATENT_FAMILIES = (GAUSSIAN, STUDENT_T)
COVARIANCE_KINDS = (CHOLESKY, IDENTITY_PLUS_AAT)

# Soft clamp on scale-net outputs, s -> c * tanh(s / c).
S_CLAMP = 5.0

LOG_2PI = float(np.log(2.0 * np.pi))


class FlowError(ArithmeticError):
    """Non-finite values inside the flow, usually from runaway parameters."""


@dataclass(frozen=True)
class LatentSpec:
    family: str
    dim: int
    covariance: str = CHOLESKY

    def __post_init__(self):
        if self.family not in LATENT_FAMILIES:
            raise ValueError(f"unknown latent family {self.family!r}")
        if self.covariance not in COVARIANCE_KINDS:
            raise ValueError(f"unknown covariance parameterization {self.covariance!r}")
        if self.dim < 1:
            raise ValueError("latent dimension must be positive")

    @property
    def n_cov(self):
        d = self.dim
        return d * d if self.covariance == IDENTITY_PLUS_AAT else d * (d + 1) // 2


@dataclass(frozen=True)
class CouplingBlockSpec:
    """One coupling block. ``perm[:n_first]`` are the coordinates of the first
    half u1, the rest form u2. Both subnetworks of a pair share the hidden width."""

    perm: tuple
    n_first: int
    hidden: int
    include_t: bool = False

    def __post_init__(self):
        d = len(self.perm)
        if sorted(self.perm) != list(range(d)):
            raise ValueError("split must be a permutation of 0..d-1")
        if not 0 < self.n_first < d:
            raise ValueError("both halves of a coupling split must be non-empty")
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")

    @property
    def dim(self):
        return len(self.perm)

    @property
    def first(self):
        return np.asarray(self.perm[: self.n_first], dtype=np.int64)

    @property
    def second(self):
        return np.asarray(self.perm[self.n_first :], dtype=np.int64)

    def net_shapes(self):
        """(name, n_in, n_out) for each subnetwork present, in parameter order."""
        n1, n2 = self.n_first, self.dim - self.n_first
        nets = [("s1", n1, n2)]
        if self.include_t:
            nets.append(("t1", n1, n2))
        nets.append(("s2", n2, n1))
        if self.include_t:
            nets.append(("t2", n2, n1))
        return nets


def net_size(n_in, hidden, n_out):
    return hidden * n_in + hidden + n_out * hidden + n_out


def make_blocks(dim, n_blocks=4, include_t=False, seed=0, hidden=None):
    """Coupling blocks with a fresh pseudo-random split per block, fixed by ``seed``."""
    if dim < 2:
        raise ValueError("coupling blocks need at least two dimensions")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xB10C,)))
    hidden = max(1, dim // 2) if hidden is None else hidden
    return [
        CouplingBlockSpec(tuple(int(i) for i in rng.permutation(dim)), dim // 2, hidden, include_t)
        for _ in range(n_blocks)
    ]


class ParameterLayout:
    """Ordered registry of named parameter groups -> half-open index ranges."""

    def __init__(self, latent, blocks):
        self.groups = {}
        pos = 0

        def add(name, size):
            nonlocal pos
            self.groups[name] = (pos, pos + size)
            pos += size

        add("latent.mu", latent.dim)
        add("latent.cov_factor", latent.n_cov)
        if latent.family == STUDENT_T:
            add("latent.nu_raw", 1)
        for i, blk in enumerate(blocks):
            for name, n_in, n_out in blk.net_shapes():
                add(f"block[{i}].{name}", net_size(n_in, blk.hidden, n_out))
        self.size = pos

    def __getitem__(self, name):
        a, b = self.groups[name]
        return slice(a, b)

    def __contains__(self, name):
        return name in self.groups

    def __len__(self):
        return self.size

    def to_json(self):
        return {name: [a, b] for name, (a, b) in self.groups.items()}

    @property
    def n_latent(self):
        return max(b for name, (_, b) in self.groups.items() if name.startswith("latent."))


@dataclass
class LatentState:
    """Latent distribution reconstructed from the flat parameters."""

    family: str
    mu: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    prec: np.ndarray
    logdet: float
    nu: float
    log_norm: float  # log normalization constant incl. -1/2 log det cov

    @property
    def dim(self):
        return self.mu.shape[0]


def _cov_factor_matrix(spec, raw):
    d = spec.dim
    if spec.covariance == IDENTITY_PLUS_AAT:
        return raw.reshape(d, d)
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = raw
    idx = np.arange(d)
    L[idx, idx] = np.exp(L[idx, idx])
    return L


def latent_state(spec, theta, layout):
    d = spec.dim
    mu = theta[layout["latent.mu"]].copy()
    F = _cov_factor_matrix(spec, theta[layout["latent.cov_factor"]])
    if spec.covariance == CHOLESKY:
        chol = F
        cov = F @ F.T
    else:
        cov = np.eye(d) + F @ F.T
        chol = np.linalg.cholesky(cov)
    diag = np.diag(chol)
    if not np.all(np.isfinite(chol)) or np.any(diag <= 0):
        raise FlowError("latent covariance is not positive definite")
    logdet = 2.0 * float(np.sum(np.log(diag)))
    inv_chol = np.linalg.solve(chol, np.eye(d))
    prec = inv_chol.T @ inv_chol
    if spec.family == STUDENT_T:
        nu = float(np.exp(theta[layout["latent.nu_raw"]][0]))
        log_norm = (
            gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu) - 0.5 * d * np.log(nu * np.pi) - 0.5 * logdet
        )
    else:
        nu = np.inf
        log_norm = -0.5 * d * LOG_2PI - 0.5 * logdet
    return LatentState(spec.family, mu, cov, chol, prec, logdet, nu, float(log_norm))


def latent_log_prob(state, z):
    """Normalized log-density of the latent Gaussian / Student-t at rows of ``z``."""
    r = np.atleast_2d(z) - state.mu
    q = np.einsum("ni,ij,nj->n", r, state.prec, r)
    if state.family == STUDENT_T:
        out = state.log_norm - 0.5 * (state.nu + state.dim) * np.log1p(q / state.nu)
    else:
        out = state.log_norm - 0.5 * q
    return out if np.ndim(z) > 1 else out[0]


def latent_sample(state, n, rng):
    g = rng.standard_normal((n, state.dim)) @ state.chol.T
    if state.family == STUDENT_T:
        g = g / np.sqrt(rng.chisquare(state.nu, size=n) / state.nu)[:, None]
    return state.mu + g


def _latent_raw(spec, mu, cov, nu):
    d = spec.dim
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    cov = np.eye(d) if cov is None else np.asarray(cov, dtype=float)
    if mu.shape != (d,) or cov.shape != (d, d):
        raise ValueError("initial mean/covariance do not match latent dimension")
    if not np.allclose(cov, cov.T):
        raise ValueError("initial covariance must be symmetric")
    if spec.covariance == CHOLESKY:
        L = np.linalg.cholesky(cov)
        idx = np.arange(d)
        L[idx, idx] = np.log(L[idx, idx])
        cov_raw = L[np.tril_indices(d)]
    else:
        w, V = np.linalg.eigh(cov - np.eye(d))
        if w.min() < -1e-12:
            raise ValueError("identity_plus_aat needs cov - I to be positive semi-definite")
        cov_raw = (V * np.sqrt(np.clip(w, 0.0, None))).ravel()
    parts = [mu, cov_raw]
    if spec.family == STUDENT_T:
        if nu is None or nu <= 0:
            raise ValueError("Student-t latent needs nu > 0")
        parts.append([np.log(nu)])
    elif nu is not None:
        raise ValueError("Gaussian latent has no nu parameter")
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


# --- flat parameter plumbing shared by both kernel backends -----------------


@dataclass(frozen=True)
class FlowMeta:
    """Integer tables that let kernels index the flat parameter vector.

    ``net_off[b]`` holds the offsets of s1, t1, s2, t2 for block ``b``
    (-1 for an absent shift net)."""

    perms: np.ndarray
    n_first: np.ndarray
    net_off: np.ndarray
    hidden: np.ndarray
    clamp: float

    @property
    def n_blocks(self):
        return self.perms.shape[0]


def _flow_meta(blocks, layout, dim):
    B = len(blocks)
    perms = np.zeros((B, dim), dtype=np.int64)
    n_first = np.zeros(B, dtype=np.int64)
    hidden = np.zeros(B, dtype=np.int64)
    net_off = -np.ones((B, 4), dtype=np.int64)
    for b, blk in enumerate(blocks):
        perms[b] = blk.perm
        n_first[b] = blk.n_first
        hidden[b] = blk.hidden
        for j, name in enumerate(("s1", "t1", "s2", "t2")):
            key = f"block[{b}].{name}"
            if key in layout:
                net_off[b, j] = layout.groups[key][0]
    return FlowMeta(perms, n_first, net_off, hidden, S_CLAMP)


def _net_apply(theta, off, n_in, hidden, n_out, u, clamp):
    o = off
    W1 = theta[o : o + hidden * n_in].reshape(hidden, n_in)
    o += hidden * n_in
    b1 = theta[o : o + hidden]
    o += hidden
    W2 = theta[o : o + n_out * hidden].reshape(n_out, hidden)
    o += n_out * hidden
    b2 = theta[o : o + n_out]
    out = np.tanh(u @ W1.T + b1) @ W2.T + b2
    if clamp > 0:
        out = clamp * np.tanh(out / clamp)
    return out


@dataclass
class DensityModel:
    latent: LatentSpec
    blocks: list
    params: np.ndarray
    layout: ParameterLayout = field(init=False, repr=False)
    meta: FlowMeta = field(init=False, repr=False)

    def __post_init__(self):
        for blk in self.blocks:
            if blk.dim != self.latent.dim:
                raise ValueError(
                    f"coupling block acts on {blk.dim} coordinates but latent has dimension {self.latent.dim}"
                )
        self.layout = ParameterLayout(self.latent, self.blocks)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise FlowError("non-finite parameters")
        self.meta = _flow_meta(self.blocks, self.layout, self.latent.dim)
        self._latent_cache = None

    @property
    def dim(self):
        return self.latent.dim

    @property
    def n_params(self):
        return self.layout.size

    def with_params(self, params):
        return DensityModel(self.latent, self.blocks, np.array(params, dtype=np.float64))

    def latent_state(self):
        if self._latent_cache is None:
            self._latent_cache = latent_state(self.latent, self.params, self.layout)
        return self._latent_cache

    def _nets(self, b):
        blk = self.blocks[b]
        n1, n2 = blk.n_first, blk.dim - blk.n_first
        off = self.meta.net_off[b]
        h = blk.hidden
        th = self.params
        c = self.meta.clamp

        def s1(u):
            return _net_apply(th, off[0], n1, h, n2, u, c)

        def t1(u):
            return _net_apply(th, off[1], n1, h, n2, u, 0.0) if off[1] >= 0 else 0.0

        def s2(u):
            return _net_apply(th, off[2], n2, h, n1, u, c)

        def t2(u):
            return _net_apply(th, off[3], n2, h, n1, u, 0.0) if off[3] >= 0 else 0.0

        return s1, t1, s2, t2

    def forward(self, z):
        """x = f(z) and log|det df/dz| for a point or a batch of rows."""
        single = np.ndim(z) == 1
        y = np.array(np.atleast_2d(z), dtype=np.float64)
        logdet = np.zeros(y.shape[0])
        with np.errstate(over="ignore", invalid="ignore"):
            for b, blk in enumerate(self.blocks):
                s1, t1, s2, t2 = self._nets(b)
                I1, I2 = blk.first, blk.second
                u1, u2 = y[:, I1], y[:, I2]
                a2 = s2(u2)
                v1 = u1 * np.exp(a2) + t2(u2)
                a1 = s1(v1)
                v2 = u2 * np.exp(a1) + t1(v1)
                logdet += a1.sum(axis=1) + a2.sum(axis=1)
                y[:, I1] = v1
                y[:, I2] = v2
        _check_finite(y, logdet)
        return (y[0], logdet[0]) if single else (y, logdet)

    def inverse(self, x):
        """z = f^-1(x) and log|det df^-1/dx|."""
        single = np.ndim(x) == 1
        y = np.array(np.atleast_2d(x), dtype=np.float64)
        logdet = np.zeros(y.shape[0])
        with np.errstate(over="ignore", invalid="ignore"):
            for b in reversed(range(len(self.blocks))):
                blk = self.blocks[b]
                s1, t1, s2, t2 = self._nets(b)
                I1, I2 = blk.first, blk.second
                v1, v2 = y[:, I1], y[:, I2]
                a1 = s1(v1)
                u2 = (v2 - t1(v1)) * np.exp(-a1)
                a2 = s2(u2)
                u1 = (v1 - t2(u2)) * np.exp(-a2)
                logdet -= a1.sum(axis=1) + a2.sum(axis=1)
                y[:, I1] = u1
                y[:, I2] = u2
        _check_finite(y, logdet)
        return (y[0], logdet[0]) if single else (y, logdet)

    def latent_log_prob(self, z):
        return latent_log_prob(self.latent_state(), z)

    def log_prob(self, x):
        z, logdet = self.inverse(x)
        return self.latent_log_prob(z) + logdet

    def latent_sample(self, n, rng):
        return latent_sample(self.latent_state(), n, rng)

    def sample(self, n, rng):
        """``n`` independent draws x = f(z), z ~ latent. Returns an (n, d) array."""
        if n < 1:
            raise ValueError("sample count must be at least 1")
        x, _ = self.forward(self.latent_sample(n, rng))
        return x


def _check_finite(y, logdet):
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(logdet))):
        raise FlowError("non-finite value inside coupling blocks; parameters are unstable")


def init_identity(latent, blocks, rng_seed=0, mean=None, cov=None, nu=None, hidden_scale=1.0):
    """Model whose flow is exactly the identity and whose latent encodes the
    requested initial distribution.

    Hidden layers get random weights so that their gradients are not all
    identical; every output layer is zero, hence s = t = 0 everywhere.
    """
    layout = ParameterLayout(latent, blocks)
    theta = np.zeros(layout.size)
    theta[: layout.n_latent] = _latent_raw(latent, mean, cov, nu)
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(0x1417,)))
    for b, blk in enumerate(blocks):
        for name, n_in, n_out in blk.net_shapes():
            a, _ = layout.groups[f"block[{b}].{name}"]
            h = blk.hidden
            theta[a : a + h * n_in] = hidden_scale * rng.standard_normal(h * n_in) / np.sqrt(n_in)
            theta[a + h * n_in : a + h * n_in + h] = 0.5 * hidden_scale * rng.standard_normal(h)
    return DensityModel(latent, list(blocks), theta)


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"FTDVPCK1"


class CheckpointError(ValueError):
    pass


def _spec_json(model):
    return {
        "latent": {"family": model.latent.family, "dim": model.latent.dim, "covariance": model.latent.covariance},
        "blocks": [
            {"perm": list(b.perm), "n_first": b.n_first, "hidden": b.hidden, "include_t": b.include_t}
            for b in model.blocks
        ],
    }


def save_checkpoint(path, model, t, extra=None):
    """Write ``magic | u64 header length | JSON header | float64 LE params``."""
    payload = np.ascontiguousarray(model.params, dtype="<f8").tobytes()
    header = dict(_spec_json(model))
    header.update(
        {
            "version": 1,
            "t": float(t),
            "n_params": int(model.n_params),
            "layout": model.layout.to_json(),
            "crc32": zlib.crc32(payload),
        }
    )
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(payload)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(model, t, header)``; raises :class:`CheckpointError` on any corruption."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = data[16 + hlen :]
    n = header.get("n_params")
    if n is None or len(payload) != 8 * n:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {8 * (n or 0)}")
    if zlib.crc32(payload) != header.get("crc32"):
        raise CheckpointError(f"{path}: checksum mismatch")
    lat = header["latent"]
    latent = LatentSpec(lat["family"], lat["dim"], lat["covariance"])
    blocks = [CouplingBlockSpec(tuple(b["perm"]), b["n_first"], b["hidden"], b["include_t"]) for b in header["blocks"]]
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    model = DensityModel(latent, blocks, params)
    if model.layout.to_json() != header["layout"]:
        raise CheckpointError(f"{path}: layout does not match block specification")
    return model, float(header["t"]), header
