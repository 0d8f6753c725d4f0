"""Vectorized numpy implementation of the flow derivative kernels.

Spatial derivatives use second-order forward jets: every intermediate vector
carries its value ``v`` (N, m), Jacobian ``j`` (N, m, d) and Hessian
``h`` (N, m, d, d) with respect to the input x. Parameter gradients use a
hand-written reverse sweep over the recomputed inverse pass.
"""
import numpy as np


def _unpack(theta, off, n_in, hidden, n_out):
    o = off
    W1 = theta[o : o + hidden * n_in].reshape(hidden, n_in)
    o += hidden * n_in
    b1 = theta[o : o + hidden]
    o += hidden
    W2 = theta[o : o + n_out * hidden].reshape(n_out, hidden)
    o += n_out * hidden
    return W1, b1, W2, theta[o : o + n_out]


class Jet:
    __slots__ = ("v", "j", "h")

    def __init__(self, v, j, h):
        self.v, self.j, self.h = v, j, h

    def __getitem__(self, idx):
        return Jet(self.v[:, idx], self.j[:, idx], self.h[:, idx])

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.v - other.v, self.j - other.j, self.h - other.h)
        return self

    def linear(self, W, b):
        return Jet(
            self.v @ W.T + b,
            np.einsum("om,nma->noa", W, self.j),
            np.einsum("om,nmab->noab", W, self.h),
        )

    def map(self, f, f1, f2):
        """Elementwise scalar function with first/second derivatives given as arrays."""
        j = self.j
        return Jet(
            f,
            f1[..., None] * j,
            f2[..., None, None] * j[..., :, None] * j[..., None, :] + f1[..., None, None] * self.h,
        )

    def tanh(self, scale=1.0):
        t = np.tanh(self.v / scale)
        f1 = 1.0 - t * t
        return self.map(scale * t, f1, -2.0 * t * f1 / scale)

    def mul_exp_neg(self, a):
        """self * exp(-a) for jets ``self`` and ``a`` of equal width."""
        e = np.exp(-a.v)
        ej = -e[..., None] * a.j
        eh = e[..., None, None] * (a.j[..., :, None] * a.j[..., None, :] - a.h)
        w = self
        return Jet(
            w.v * e,
            w.j * e[..., None] + w.v[..., None] * ej,
            w.h * e[..., None, None]
            + w.v[..., None, None] * eh
            + w.j[..., :, None] * ej[..., None, :]
            + ej[..., :, None] * w.j[..., None, :],
        )

    def total(self):
        return self.v.sum(axis=1), self.j.sum(axis=1), self.h.sum(axis=1)


def _net_jet(theta, off, n_in, hidden, n_out, u, clamp):
    W1, b1, W2, b2 = _unpack(theta, off, n_in, hidden, n_out)
    out = u.linear(W1, b1).tanh().linear(W2, b2)
    return out.tanh(clamp) if clamp > 0 else out


def spatial(theta, meta, lat, X):
    """log p, grad_x log p, hess_x log p and z = f^-1(x) for rows of ``X``."""
    N, d = X.shape
    y = Jet(X.copy(), np.broadcast_to(np.eye(d), (N, d, d)).copy(), np.zeros((N, d, d, d)))
    Lv = np.zeros(N)
    Lg = np.zeros((N, d))
    Lh = np.zeros((N, d, d))
    for b in reversed(range(meta.n_blocks)):
        n1 = meta.n_first[b]
        n2 = d - n1
        h = meta.hidden[b]
        I1, I2 = meta.perms[b, :n1], meta.perms[b, n1:]
        off = meta.net_off[b]
        v1, v2 = y[I1], y[I2]
        a1 = _net_jet(theta, off[0], n1, h, n2, v1, meta.clamp)
        w2 = v2 - _net_jet(theta, off[1], n1, h, n2, v1, 0.0) if off[1] >= 0 else v2
        u2 = w2.mul_exp_neg(a1)
        a2 = _net_jet(theta, off[2], n2, h, n1, u2, meta.clamp)
        w1 = v1 - _net_jet(theta, off[3], n2, h, n1, u2, 0.0) if off[3] >= 0 else v1
        u1 = w1.mul_exp_neg(a2)
        for a in (a1, a2):
            tv, tg, th = a.total()
            Lv -= tv
            Lg -= tg
            Lh -= th
        for part, idx in ((u1, I1), (u2, I2)):
            y.v[:, idx] = part.v
            y.j[:, idx] = part.j
            y.h[:, idx] = part.h

    is_t, mu, prec, nu, log_norm = lat
    r = y.v - mu
    yp = r @ prec
    q = np.einsum("ni,ni->n", r, yp)
    if is_t:
        w = (nu + d) / (nu + q)
        lp = log_norm - 0.5 * (nu + d) * np.log1p(q / nu)
        gz = -w[:, None] * yp
        hz = -w[:, None, None] * prec + (2.0 * w / (nu + q))[:, None, None] * yp[:, :, None] * yp[:, None, :]
    else:
        lp = log_norm - 0.5 * q
        gz = -yp
        hz = np.broadcast_to(-prec, (N, d, d))
    logp = lp + Lv
    grad = np.einsum("nk,nka->na", gz, y.j) + Lg
    hess = np.einsum("nka,nkl,nlb->nab", y.j, hz, y.j) + np.einsum("nk,nkab->nab", gz, y.h) + Lh
    return logp, grad, hess, y.v


def _net_forward(theta, off, n_in, hidden, n_out, u, clamp):
    W1, b1, W2, b2 = _unpack(theta, off, n_in, hidden, n_out)
    hid = np.tanh(u @ W1.T + b1)
    pre = hid @ W2.T + b2
    if clamp > 0:
        tc = np.tanh(pre / clamp)
        return clamp * tc, (hid, tc)
    return pre, (hid, None)


def _net_backward(theta, off, n_in, hidden, n_out, u, cache, g_out, O):
    """Write per-sample parameter gradients into ``O`` and return d/du."""
    W1, _, W2, _ = _unpack(theta, off, n_in, hidden, n_out)
    hid, tc = cache
    g_pre = g_out * (1.0 - tc * tc) if tc is not None else g_out
    g_a = (g_pre @ W2) * (1.0 - hid * hid)
    N = u.shape[0]
    o = off
    O[:, o : o + hidden * n_in] = (g_a[:, :, None] * u[:, None, :]).reshape(N, -1)
    o += hidden * n_in
    O[:, o : o + hidden] = g_a
    o += hidden
    O[:, o : o + n_out * hidden] = (g_pre[:, :, None] * hid[:, None, :]).reshape(N, -1)
    o += n_out * hidden
    O[:, o : o + n_out] = g_pre
    return g_a @ W1


def _latent_value_grad(lat, z):
    is_t, mu, prec, nu, log_norm = lat
    d = z.shape[1]
    r = z - mu
    yp = r @ prec
    q = np.einsum("ni,ni->n", r, yp)
    if is_t:
        w = (nu + d) / (nu + q)
        return log_norm - 0.5 * (nu + d) * np.log1p(q / nu), -w[:, None] * yp
    return log_norm - 0.5 * q, -yp


def param_grad(theta, meta, lat, X, O):
    """Fill the flow columns of ``O`` with d log p / d theta; returns (log p, z)."""
    N, d = X.shape
    y = X.copy()
    inputs = []
    logdet = np.zeros(N)
    for b in reversed(range(meta.n_blocks)):
        inputs.append(y.copy())
        y, ld = _block_inverse(theta, meta, b, y)[:2]
        logdet += ld
    inputs.reverse()
    lp, g = _latent_value_grad(lat, y)
    for b in range(meta.n_blocks):
        _, _, st = _block_inverse(theta, meta, b, inputs[b])
        n1 = meta.n_first[b]
        n2 = d - n1
        h = meta.hidden[b]
        off = meta.net_off[b]
        I1, I2 = meta.perms[b, :n1], meta.perms[b, n1:]
        v1, u2, u1, e1, e2, c_s1, c_t1, c_s2, c_t2 = st
        g_u1 = g[:, I1]
        g_u2 = g[:, I2].copy()
        g_v1 = g_u1 * e2
        g_u2 += _net_backward(theta, off[2], n2, h, n1, u2, c_s2, -g_u1 * u1 - 1.0, O)
        if off[3] >= 0:
            g_u2 += _net_backward(theta, off[3], n2, h, n1, u2, c_t2, -g_v1, O)
        g_v2 = g_u2 * e1
        g_v1 = g_v1 + _net_backward(theta, off[0], n1, h, n2, v1, c_s1, -g_u2 * u2 - 1.0, O)
        if off[1] >= 0:
            g_v1 = g_v1 + _net_backward(theta, off[1], n1, h, n2, v1, c_t1, -g_v2, O)
        g = np.empty_like(g)
        g[:, I1] = g_v1
        g[:, I2] = g_v2
    return lp + logdet, y


def _block_inverse(theta, meta, b, y):
    d = y.shape[1]
    n1 = meta.n_first[b]
    n2 = d - n1
    h = meta.hidden[b]
    off = meta.net_off[b]
    I1, I2 = meta.perms[b, :n1], meta.perms[b, n1:]
    v1, v2 = y[:, I1], y[:, I2]
    a1, c_s1 = _net_forward(theta, off[0], n1, h, n2, v1, meta.clamp)
    if off[1] >= 0:
        sh1, c_t1 = _net_forward(theta, off[1], n1, h, n2, v1, 0.0)
    else:
        sh1, c_t1 = 0.0, None
    e1 = np.exp(-a1)
    u2 = (v2 - sh1) * e1
    a2, c_s2 = _net_forward(theta, off[2], n2, h, n1, u2, meta.clamp)
    if off[3] >= 0:
        sh2, c_t2 = _net_forward(theta, off[3], n2, h, n1, u2, 0.0)
    else:
        sh2, c_t2 = 0.0, None
    e2 = np.exp(-a2)
    u1 = (v1 - sh2) * e2
    out = np.empty_like(y)
    out[:, I1] = u1
    out[:, I2] = u2
    ld = -(a1.sum(axis=1) + a2.sum(axis=1))
    return out, ld, (v1, u2, u1, e1, e2, c_s1, c_t1, c_s2, c_t2)
