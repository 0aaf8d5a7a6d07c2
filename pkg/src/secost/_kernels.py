"""numba loops for the high-resolution layers, where BLAS sees tiny matrices.

Every kernel has a numpy counterpart in :mod:`secost.nn`; the tests check the
two against each other.
"""

import numpy as np
from numba import njit

_opts = dict(cache=True, fastmath=True, nogil=True)


@njit(**_opts)
def conv_fwd(xp, w, bias, out):
    """Stride-1 direct correlation of padded input ``xp`` into ``out``."""
    n_, c_, _, _ = xp.shape
    k_, _, kh, kw = w.shape
    _, _, ho, wo = out.shape
    for n in range(n_):
        for k in range(k_):
            for h in range(ho):
                row = out[n, k, h]
                bv = bias[k]
                for x in range(wo):
                    row[x] = bv
                for c in range(c_):
                    for a in range(kh):
                        src = xp[n, c, h + a]
                        for b in range(kw):
                            wv = w[k, c, a, b]
                            for x in range(wo):
                                row[x] += wv * src[x + b]


@njit(**_opts)
def conv_bwd(xp, w, dout, dxp, dw, db, want_dx):
    """Accumulate d(padded input), d(weight), d(bias) for :func:`conv_fwd`."""
    n_, c_, _, _ = xp.shape
    k_, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    for n in range(n_):
        for k in range(k_):
            for h in range(ho):
                drow = dout[n, k, h]
                s = 0.0
                for x in range(wo):
                    s += drow[x]
                db[k] += s
                for c in range(c_):
                    for a in range(kh):
                        src = xp[n, c, h + a]
                        dst = dxp[n, c, h + a]
                        for b in range(kw):
                            wv = w[k, c, a, b]
                            acc = drow[0] * 0
                            for x in range(wo):
                                acc += drow[x] * src[x + b]
                            dw[k, c, a, b] += acc
                            if not want_dx:
                                continue
                            for x in range(wo):
                                dst[x + b] += wv * drow[x]


@njit(**_opts)
def channel_moments(x):
    """Per-channel float64 sum and sum of squares over (N, H, W)."""
    n_, c_, h_, w_ = x.shape
    s1 = np.zeros(c_)
    s2 = np.zeros(c_)
    for n in range(n_):
        for c in range(c_):
            a1 = 0.0
            a2 = 0.0
            for h in range(h_):
                row = x[n, c, h]
                for j in range(w_):
                    v = row[j]
                    a1 += v
                    a2 += v * v
            s1[c] += a1
            s2[c] += a2
    return s1, s2


@njit(**_opts)
def channel_dot(a, b):
    """Per-channel float64 sums of ``a`` and of ``a * b``."""
    n_, c_, h_, w_ = a.shape
    s1 = np.zeros(c_)
    s2 = np.zeros(c_)
    for n in range(n_):
        for c in range(c_):
            a1 = 0.0
            a2 = 0.0
            for h in range(h_):
                ra = a[n, c, h]
                rb = b[n, c, h]
                for j in range(w_):
                    a1 += ra[j]
                    a2 += ra[j] * rb[j]
            s1[c] += a1
            s2[c] += a2
    return s1, s2


@njit(**_opts)
def maxpool_fwd(x, kh, kw, out, arg):
    """Non-overlapping max pool; ``arg`` keeps the first argmax per window."""
    n_, c_, ho, wo = out.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, c, i * kh, j * kw]
                    bi = 0
                    for a in range(kh):
                        for b in range(kw):
                            v = x[n, c, i * kh + a, j * kw + b]
                            if v > best:
                                best = v
                                bi = a * kw + b
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = bi


@njit(**_opts)
def maxpool_bwd(dout, arg, kh, kw, dx):
    n_, c_, ho, wo = dout.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(ho):
                for j in range(wo):
                    t = arg[n, c, i, j]
                    dx[n, c, i * kh + t // kw, j * kw + t % kw] += dout[n, c, i, j]


@njit(**_opts)
def channel_affine(x, scale, shift, out):
    """out = x * scale[c] + shift[c]."""
    n_, c_, h_, w_ = x.shape
    for n in range(n_):
        for c in range(c_):
            sc = scale[c]
            sh = shift[c]
            for h in range(h_):
                src = x[n, c, h]
                dst = out[n, c, h]
                for j in range(w_):
                    dst[j] = src[j] * sc + sh


@njit(**_opts)
def channel_affine2(a, b, sa, sb, shift, out):
    """out = a * sa[c] + b * sb[c] + shift[c]."""
    n_, c_, h_, w_ = a.shape
    for n in range(n_):
        for c in range(c_):
            ka = sa[c]
            kb = sb[c]
            sh = shift[c]
            for h in range(h_):
                ra = a[n, c, h]
                rb = b[n, c, h]
                dst = out[n, c, h]
                for j in range(w_):
                    dst[j] = ra[j] * ka + rb[j] * kb + sh
