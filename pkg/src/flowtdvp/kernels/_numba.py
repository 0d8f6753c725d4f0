"""Per-sample numba kernels mirroring :mod:`flowtdvp.kernels._numpy`.

Scratch buffers are allocated once per call and sized for the widest net so
the inner loops never allocate.
"""
import math

import numpy as np

from .._accel import optional_njit

jit = optional_njit(cache=True, fastmath=False)


@jit
def _linear_jet(theta, w_off, b_off, n_in, n_out, iv, ij, ih, ov, oj, oh, d, order):
    for o in range(n_out):
        s = theta[b_off + o]
        for i in range(n_in):
            s += theta[w_off + o * n_in + i] * iv[i]
        ov[o] = s
        if order >= 1:
            for a in range(d):
                s = 0.0
                for i in range(n_in):
                    s += theta[w_off + o * n_in + i] * ij[i, a]
                oj[o, a] = s
        if order >= 2:
            for a in range(d):
                for c in range(a, d):
                    s = 0.0
                    for i in range(n_in):
                        s += theta[w_off + o * n_in + i] * ih[i, a, c]
                    oh[o, a, c] = s
                    oh[o, c, a] = s


@jit
def _tanh_jet(scale, v, j, h, n, d, order):
    for o in range(n):
        t = math.tanh(v[o] / scale)
        f1 = 1.0 - t * t
        if order >= 2:
            f2 = -2.0 * t * f1 / scale
            for a in range(d):
                for c in range(a, d):
                    val = f2 * j[o, a] * j[o, c] + f1 * h[o, a, c]
                    h[o, a, c] = val
                    h[o, c, a] = val
        if order >= 1:
            for a in range(d):
                j[o, a] *= f1
        v[o] = scale * t


@jit
def _net_jet(theta, off, n_in, hidden, n_out, clamp, iv, ij, ih, hv, hj, hh, ov, oj, oh, d, order):
    w1 = off
    b1 = w1 + hidden * n_in
    w2 = b1 + hidden
    b2 = w2 + n_out * hidden
    _linear_jet(theta, w1, b1, n_in, hidden, iv, ij, ih, hv, hj, hh, d, order)
    _tanh_jet(1.0, hv, hj, hh, hidden, d, order)
    _linear_jet(theta, w2, b2, hidden, n_out, hv, hj, hh, ov, oj, oh, d, order)
    if clamp > 0.0:
        _tanh_jet(clamp, ov, oj, oh, n_out, d, order)


@jit
def _gather(idx, start, n, yv, yj, yh, ov, oj, oh, d, order):
    for k in range(n):
        src = idx[start + k]
        ov[k] = yv[src]
        if order >= 1:
            for a in range(d):
                oj[k, a] = yj[src, a]
        if order >= 2:
            for a in range(d):
                for c in range(d):
                    oh[k, a, c] = yh[src, a, c]


@jit
def _sub_jet(wv, wj, wh, cv, cj, ch, n, d, order):
    for k in range(n):
        wv[k] -= cv[k]
        if order >= 1:
            for a in range(d):
                wj[k, a] -= cj[k, a]
        if order >= 2:
            for a in range(d):
                for c in range(d):
                    wh[k, a, c] -= ch[k, a, c]


@jit
def _mul_exp_neg_scatter(idx, start, n, wv, wj, wh, av, aj, ah, yv, yj, yh, d, order):
    """y[idx] = w * exp(-a), all as jets."""
    for k in range(n):
        e = math.exp(-av[k])
        dst = idx[start + k]
        yv[dst] = wv[k] * e
        if order >= 1:
            for a in range(d):
                yj[dst, a] = e * (wj[k, a] - wv[k] * aj[k, a])
        if order >= 2:
            for a in range(d):
                for c in range(a, d):
                    eh = e * (aj[k, a] * aj[k, c] - ah[k, a, c])
                    val = (
                        e * wh[k, a, c]
                        + wv[k] * eh
                        - e * (wj[k, a] * aj[k, c] + aj[k, a] * wj[k, c])
                    )
                    yh[dst, a, c] = val
                    yh[dst, c, a] = val


@jit
def _accum_logdet(av, aj, ah, n, Lv, Lg, Lh, d, order):
    for k in range(n):
        Lv[0] -= av[k]
        if order >= 1:
            for a in range(d):
                Lg[a] -= aj[k, a]
        if order >= 2:
            for a in range(d):
                for c in range(d):
                    Lh[a, c] -= ah[k, a, c]


@jit
def spatial_kernel(theta, perms, n_first, net_off, hidden, clamp, is_t, mu, prec, nu, log_norm, X,
                   out_logp, out_grad, out_hess, out_z):
    N, d = X.shape
    B = perms.shape[0]
    order = 2
    m = d
    hmax = 1
    for b in range(B):
        if hidden[b] > hmax:
            hmax = hidden[b]
    yv = np.empty(d)
    yj = np.empty((d, d))
    yh = np.empty((d, d, d))
    v1v = np.empty(m); v1j = np.empty((m, d)); v1h = np.empty((m, d, d))
    wv = np.empty(m); wj = np.empty((m, d)); wh = np.empty((m, d, d))
    av = np.empty(m); aj = np.empty((m, d)); ah = np.empty((m, d, d))
    cv = np.empty(m); cj = np.empty((m, d)); ch = np.empty((m, d, d))
    hv = np.empty(hmax); hj = np.empty((hmax, d)); hh = np.empty((hmax, d, d))
    u2v = np.empty(m); u2j = np.empty((m, d)); u2h = np.empty((m, d, d))
    Lv = np.empty(1); Lg = np.empty(d); Lh = np.empty((d, d))
    r = np.empty(d); yp = np.empty(d); gz = np.empty(d); hz = np.empty((d, d))
    tmp = np.empty((d, d))
    for n in range(N):
        for i in range(d):
            yv[i] = X[n, i]
            for a in range(d):
                yj[i, a] = 1.0 if i == a else 0.0
                for c in range(d):
                    yh[i, a, c] = 0.0
        Lv[0] = 0.0
        for a in range(d):
            Lg[a] = 0.0
            for c in range(d):
                Lh[a, c] = 0.0
        for b in range(B - 1, -1, -1):
            n1 = n_first[b]
            n2 = d - n1
            h = hidden[b]
            idx = perms[b]
            # v1 = y[I1]; w = v2 = y[I2]
            _gather(idx, 0, n1, yv, yj, yh, v1v, v1j, v1h, d, order)
            _gather(idx, n1, n2, yv, yj, yh, wv, wj, wh, d, order)
            _net_jet(theta, net_off[b, 0], n1, h, n2, clamp, v1v, v1j, v1h, hv, hj, hh, av, aj, ah, d, order)
            if net_off[b, 1] >= 0:
                _net_jet(theta, net_off[b, 1], n1, h, n2, 0.0, v1v, v1j, v1h, hv, hj, hh, cv, cj, ch, d, order)
                _sub_jet(wv, wj, wh, cv, cj, ch, n2, d, order)
            _accum_logdet(av, aj, ah, n2, Lv, Lg, Lh, d, order)
            _mul_exp_neg_scatter(idx, n1, n2, wv, wj, wh, av, aj, ah, yv, yj, yh, d, order)
            _gather(idx, n1, n2, yv, yj, yh, u2v, u2j, u2h, d, order)
            _net_jet(theta, net_off[b, 2], n2, h, n1, clamp, u2v, u2j, u2h, hv, hj, hh, av, aj, ah, d, order)
            if net_off[b, 3] >= 0:
                _net_jet(theta, net_off[b, 3], n2, h, n1, 0.0, u2v, u2j, u2h, hv, hj, hh, cv, cj, ch, d, order)
                _sub_jet(v1v, v1j, v1h, cv, cj, ch, n1, d, order)
            _accum_logdet(av, aj, ah, n1, Lv, Lg, Lh, d, order)
            _mul_exp_neg_scatter(idx, 0, n1, v1v, v1j, v1h, av, aj, ah, yv, yj, yh, d, order)

        q = 0.0
        for i in range(d):
            r[i] = yv[i] - mu[i]
        for i in range(d):
            s = 0.0
            for k in range(d):
                s += r[k] * prec[k, i]
            yp[i] = s
            q += r[i] * s
        if is_t:
            w = (nu + d) / (nu + q)
            lp = log_norm - 0.5 * (nu + d) * math.log1p(q / nu)
            w2 = 2.0 * w / (nu + q)
            for i in range(d):
                gz[i] = -w * yp[i]
                for k in range(d):
                    hz[i, k] = -w * prec[i, k] + w2 * yp[i] * yp[k]
        else:
            lp = log_norm - 0.5 * q
            for i in range(d):
                gz[i] = -yp[i]
                for k in range(d):
                    hz[i, k] = -prec[i, k]
        out_logp[n] = lp + Lv[0]
        for a in range(d):
            s = Lg[a]
            for k in range(d):
                s += gz[k] * yj[k, a]
            out_grad[n, a] = s
            out_z[n, a] = yv[a]
        # tmp = hz @ J
        for k in range(d):
            for c in range(d):
                s = 0.0
                for l in range(d):
                    s += hz[k, l] * yj[l, c]
                tmp[k, c] = s
        for a in range(d):
            for c in range(a, d):
                s = Lh[a, c]
                for k in range(d):
                    s += yj[k, a] * tmp[k, c] + gz[k] * yh[k, a, c]
                out_hess[n, a, c] = s
                out_hess[n, c, a] = s


# --- reverse sweep for parameter gradients ----------------------------------


@jit
def _net_value(theta, off, n_in, hidden, n_out, clamp, u, hid, out, tc):
    w1 = off
    b1 = w1 + hidden * n_in
    w2 = b1 + hidden
    b2 = w2 + n_out * hidden
    for k in range(hidden):
        s = theta[b1 + k]
        for i in range(n_in):
            s += theta[w1 + k * n_in + i] * u[i]
        hid[k] = math.tanh(s)
    for o in range(n_out):
        s = theta[b2 + o]
        for k in range(hidden):
            s += theta[w2 + o * hidden + k] * hid[k]
        if clamp > 0.0:
            t = math.tanh(s / clamp)
            tc[o] = t
            out[o] = clamp * t
        else:
            tc[o] = 0.0
            out[o] = s


@jit
def _net_backward(theta, off, n_in, hidden, n_out, clamp, u, hid, tc, g_out, O_row, g_u, g_pre, g_a):
    """Parameter gradients into ``O_row``; accumulates d/du into ``g_u``."""
    w1 = off
    b1 = w1 + hidden * n_in
    w2 = b1 + hidden
    b2 = w2 + n_out * hidden
    for o in range(n_out):
        g_pre[o] = g_out[o] * (1.0 - tc[o] * tc[o]) if clamp > 0.0 else g_out[o]
        O_row[b2 + o] = g_pre[o]
        for k in range(hidden):
            O_row[w2 + o * hidden + k] = g_pre[o] * hid[k]
    for k in range(hidden):
        s = 0.0
        for o in range(n_out):
            s += g_pre[o] * theta[w2 + o * hidden + k]
        g_a[k] = s * (1.0 - hid[k] * hid[k])
        O_row[b1 + k] = g_a[k]
        for i in range(n_in):
            O_row[w1 + k * n_in + i] = g_a[k] * u[i]
    for i in range(n_in):
        s = 0.0
        for k in range(hidden):
            s += g_a[k] * theta[w1 + k * n_in + i]
        g_u[i] += s


@jit
def param_kernel(theta, perms, n_first, net_off, hidden, clamp, is_t, mu, prec, nu, log_norm, X, O,
                 out_logp, out_z):
    N, d = X.shape
    B = perms.shape[0]
    hmax = 1
    for b in range(B):
        if hidden[b] > hmax:
            hmax = hidden[b]
    ys = np.empty((B + 1, d))
    v1 = np.empty(d); v2 = np.empty(d); u1 = np.empty(d); u2 = np.empty(d)
    a1 = np.empty(d); a2 = np.empty(d); c1 = np.empty(d); c2 = np.empty(d)
    e1 = np.empty(d); e2 = np.empty(d)
    hs1 = np.empty(hmax); ht1 = np.empty(hmax); hs2 = np.empty(hmax); ht2 = np.empty(hmax)
    ts1 = np.empty(d); tt1 = np.empty(d); ts2 = np.empty(d); tt2 = np.empty(d)
    g = np.empty(d); g_u1 = np.empty(d); g_u2 = np.empty(d); g_v1 = np.empty(d); g_v2 = np.empty(d)
    g_out = np.empty(d); g_pre = np.empty(d); g_a = np.empty(hmax)
    r = np.empty(d); yp = np.empty(d)
    for n in range(N):
        O_row = O[n]
        for i in range(d):
            ys[B, i] = X[n, i]
        logdet = 0.0
        for b in range(B - 1, -1, -1):
            logdet += _block_inverse(theta, perms[b], n_first[b], net_off[b], hidden[b], clamp, ys[b + 1], ys[b],
                                     v1, v2, u1, u2, a1, a2, c1, c2, e1, e2,
                                     hs1, ht1, hs2, ht2, ts1, tt1, ts2, tt2)
        q = 0.0
        for i in range(d):
            r[i] = ys[0, i] - mu[i]
        for i in range(d):
            s = 0.0
            for k in range(d):
                s += r[k] * prec[k, i]
            yp[i] = s
            q += r[i] * s
        if is_t:
            w = (nu + d) / (nu + q)
            lp = log_norm - 0.5 * (nu + d) * math.log1p(q / nu)
        else:
            w = 1.0
            lp = log_norm - 0.5 * q
        for i in range(d):
            g[i] = -w * yp[i]
            out_z[n, i] = ys[0, i]
        out_logp[n] = lp + logdet

        for b in range(B):
            n1 = n_first[b]
            n2 = d - n1
            h = hidden[b]
            idx = perms[b]
            off = net_off[b]
            _block_inverse(theta, idx, n1, off, h, clamp, ys[b + 1], ys[b],
                           v1, v2, u1, u2, a1, a2, c1, c2, e1, e2,
                           hs1, ht1, hs2, ht2, ts1, tt1, ts2, tt2)
            for k in range(n1):
                g_u1[k] = g[idx[k]]
                g_v1[k] = g_u1[k] * e2[k]
            for k in range(n2):
                g_u2[k] = g[idx[n1 + k]]
            for k in range(n1):
                g_out[k] = -g_u1[k] * u1[k] - 1.0
            _net_backward(theta, off[2], n2, h, n1, clamp, u2, hs2, ts2, g_out, O_row, g_u2, g_pre, g_a)
            if off[3] >= 0:
                for k in range(n1):
                    g_out[k] = -g_v1[k]
                _net_backward(theta, off[3], n2, h, n1, 0.0, u2, ht2, tt2, g_out, O_row, g_u2, g_pre, g_a)
            for k in range(n2):
                g_v2[k] = g_u2[k] * e1[k]
                g_out[k] = -g_u2[k] * u2[k] - 1.0
            _net_backward(theta, off[0], n1, h, n2, clamp, v1, hs1, ts1, g_out, O_row, g_v1, g_pre, g_a)
            if off[1] >= 0:
                for k in range(n2):
                    g_out[k] = -g_v2[k]
                _net_backward(theta, off[1], n1, h, n2, 0.0, v1, ht1, tt1, g_out, O_row, g_v1, g_pre, g_a)
            for k in range(n1):
                g[idx[k]] = g_v1[k]
            for k in range(n2):
                g[idx[n1 + k]] = g_v2[k]


@jit
def _block_inverse(theta, idx, n1, off, h, clamp, yin, yout, v1, v2, u1, u2, a1, a2, c1, c2, e1, e2,
                   hs1, ht1, hs2, ht2, ts1, tt1, ts2, tt2):
    d = yin.shape[0]
    n2 = d - n1
    for k in range(n1):
        v1[k] = yin[idx[k]]
    for k in range(n2):
        v2[k] = yin[idx[n1 + k]]
    _net_value(theta, off[0], n1, h, n2, clamp, v1, hs1, a1, ts1)
    if off[1] >= 0:
        _net_value(theta, off[1], n1, h, n2, 0.0, v1, ht1, c1, tt1)
    else:
        for k in range(n2):
            c1[k] = 0.0
    ld = 0.0
    for k in range(n2):
        e1[k] = math.exp(-a1[k])
        u2[k] = (v2[k] - c1[k]) * e1[k]
        ld -= a1[k]
    _net_value(theta, off[2], n2, h, n1, clamp, u2, hs2, a2, ts2)
    if off[3] >= 0:
        _net_value(theta, off[3], n2, h, n1, 0.0, u2, ht2, c2, tt2)
    else:
        for k in range(n1):
            c2[k] = 0.0
    for k in range(n1):
        e2[k] = math.exp(-a2[k])
        u1[k] = (v1[k] - c2[k]) * e2[k]
        ld -= a2[k]
    for k in range(n1):
        yout[idx[k]] = u1[k]
    for k in range(n2):
        yout[idx[n1 + k]] = u2[k]
    return ld
