"""Numba-jitted kernel implementations.

All kernels are deterministic: prange only ever splits independent output
regions and every output element is written by exactly one iteration, with a
fixed accumulation order. Convolution inputs arrive pre-padded, so the inner
loops are branch-free and run over contiguous rows, which LLVM vectorizes
without any reassociation (the lanes are independent output elements).

Each convolution kernel has a unit-stride nest (the case every network layer
hits) and a generic strided nest. Per output element both accumulate
products in (channel, kd, kh, kw) order with the bias added last, which is
exactly the 2D order when kd == 1, so a depth-1 3D convolution reproduces
the 2D result bit for bit.

Weight gradients accumulate per-row into a temporary line buffer (again
independent lanes) and reduce that buffer once at the end.
"""

import numpy as np
from numba import njit, prange

EDT_NO_SOURCE = np.int64(1) << 40


# ---------------------------------------------------------------------------
# convolution (input pre-padded by the dispatch layer)


@njit(cache=True, nogil=True, parallel=True)
def conv3d_forward(xp, w, b, sd, sh, sw, out):
    n, ci = xp.shape[0], xp.shape[1]
    co = w.shape[0]
    kd, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    od, oh, ow = out.shape[2], out.shape[3], out.shape[4]
    zero = xp.dtype.type(0)
    for p in prange(n * co):
        nn = p // co
        oc = p % co
        for z in range(od):
            for y in range(oh):
                orow = out[nn, oc, z, y]
                for xo in range(ow):
                    orow[xo] = zero
                if sw == 1:
                    for c in range(ci):
                        for i in range(kd):
                            for j in range(kh):
                                xrow = xp[nn, c, z * sd + i, y * sh + j]
                                for k in range(kw):
                                    wv = w[oc, c, i, j, k]
                                    xr = xrow[k:]
                                    for xo in range(ow):
                                        orow[xo] += wv * xr[xo]
                else:
                    for c in range(ci):
                        for i in range(kd):
                            for j in range(kh):
                                xrow = xp[nn, c, z * sd + i, y * sh + j]
                                for k in range(kw):
                                    wv = w[oc, c, i, j, k]
                                    for xo in range(ow):
                                        orow[xo] += wv * xrow[xo * sw + k]
                bv = b[oc]
                for xo in range(ow):
                    orow[xo] += bv


@njit(cache=True, nogil=True, parallel=True)
def conv3d_bwd_input(dout, w, sd, sh, sw, dxp):
    n, co = dout.shape[0], dout.shape[1]
    ci = w.shape[1]
    kd, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    od, oh, ow = dout.shape[2], dout.shape[3], dout.shape[4]
    for nn in prange(n):
        for oc in range(co):
            for z in range(od):
                for y in range(oh):
                    grow = dout[nn, oc, z, y]
                    for c in range(ci):
                        for i in range(kd):
                            for j in range(kh):
                                drow = dxp[nn, c, z * sd + i, y * sh + j]
                                if sw == 1:
                                    for k in range(kw):
                                        wv = w[oc, c, i, j, k]
                                        dr = drow[k:]
                                        for xo in range(ow):
                                            dr[xo] += wv * grow[xo]
                                else:
                                    for k in range(kw):
                                        wv = w[oc, c, i, j, k]
                                        for xo in range(ow):
                                            drow[xo * sw + k] += wv * grow[xo]


@njit(cache=True, nogil=True, parallel=True)
def conv3d_bwd_params(dout, xp, sd, sh, sw, dw, db):
    n = xp.shape[0]
    co, ci = dw.shape[0], dw.shape[1]
    kd, kh, kw = dw.shape[2], dw.shape[3], dw.shape[4]
    od, oh, ow = dout.shape[2], dout.shape[3], dout.shape[4]
    zero = dout.dtype.type(0)
    for oc in prange(co):
        tmp = np.empty(ow, dout.dtype)
        for xo in range(ow):
            tmp[xo] = zero
        for nn in range(n):
            for z in range(od):
                for y in range(oh):
                    grow = dout[nn, oc, z, y]
                    for xo in range(ow):
                        tmp[xo] += grow[xo]
        bacc = zero
        for xo in range(ow):
            bacc += tmp[xo]
        db[oc] = bacc
        for c in range(ci):
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        for xo in range(ow):
                            tmp[xo] = zero
                        if sw == 1:
                            for nn in range(n):
                                for z in range(od):
                                    for y in range(oh):
                                        grow = dout[nn, oc, z, y]
                                        xr = xp[nn, c, z * sd + i, y * sh + j][k:]
                                        for xo in range(ow):
                                            tmp[xo] += grow[xo] * xr[xo]
                        else:
                            for nn in range(n):
                                for z in range(od):
                                    for y in range(oh):
                                        grow = dout[nn, oc, z, y]
                                        xrow = xp[nn, c, z * sd + i, y * sh + j]
                                        for xo in range(ow):
                                            tmp[xo] += grow[xo] * xrow[xo * sw + k]
                        acc = zero
                        for xo in range(ow):
                            acc += tmp[xo]
                        dw[oc, c, i, j, k] = acc


@njit(cache=True, nogil=True, parallel=True)
def conv2d_forward(xp, w, b, sh, sw, out):
    n, ci = xp.shape[0], xp.shape[1]
    co = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = out.shape[2], out.shape[3]
    zero = xp.dtype.type(0)
    for p in prange(n * co):
        nn = p // co
        oc = p % co
        for y in range(oh):
            orow = out[nn, oc, y]
            for xo in range(ow):
                orow[xo] = zero
            if sw == 1:
                for c in range(ci):
                    for j in range(kh):
                        xrow = xp[nn, c, y * sh + j]
                        for k in range(kw):
                            wv = w[oc, c, j, k]
                            xr = xrow[k:]
                            for xo in range(ow):
                                orow[xo] += wv * xr[xo]
            else:
                for c in range(ci):
                    for j in range(kh):
                        xrow = xp[nn, c, y * sh + j]
                        for k in range(kw):
                            wv = w[oc, c, j, k]
                            for xo in range(ow):
                                orow[xo] += wv * xrow[xo * sw + k]
            bv = b[oc]
            for xo in range(ow):
                orow[xo] += bv


@njit(cache=True, nogil=True, parallel=True)
def conv2d_bwd_input(dout, w, sh, sw, dxp):
    n, co = dout.shape[0], dout.shape[1]
    ci = w.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = dout.shape[2], dout.shape[3]
    for nn in prange(n):
        for oc in range(co):
            for y in range(oh):
                grow = dout[nn, oc, y]
                for c in range(ci):
                    for j in range(kh):
                        drow = dxp[nn, c, y * sh + j]
                        if sw == 1:
                            for k in range(kw):
                                wv = w[oc, c, j, k]
                                dr = drow[k:]
                                for xo in range(ow):
                                    dr[xo] += wv * grow[xo]
                        else:
                            for k in range(kw):
                                wv = w[oc, c, j, k]
                                for xo in range(ow):
                                    drow[xo * sw + k] += wv * grow[xo]


@njit(cache=True, nogil=True, parallel=True)
def conv2d_bwd_params(dout, xp, sh, sw, dw, db):
    n = xp.shape[0]
    co, ci = dw.shape[0], dw.shape[1]
    kh, kw = dw.shape[2], dw.shape[3]
    oh, ow = dout.shape[2], dout.shape[3]
    zero = dout.dtype.type(0)
    for oc in prange(co):
        tmp = np.empty(ow, dout.dtype)
        for xo in range(ow):
            tmp[xo] = zero
        for nn in range(n):
            for y in range(oh):
                grow = dout[nn, oc, y]
                for xo in range(ow):
                    tmp[xo] += grow[xo]
        bacc = zero
        for xo in range(ow):
            bacc += tmp[xo]
        db[oc] = bacc
        for c in range(ci):
            for j in range(kh):
                for k in range(kw):
                    for xo in range(ow):
                        tmp[xo] = zero
                    if sw == 1:
                        for nn in range(n):
                            for y in range(oh):
                                grow = dout[nn, oc, y]
                                xr = xp[nn, c, y * sh + j][k:]
                                for xo in range(ow):
                                    tmp[xo] += grow[xo] * xr[xo]
                    else:
                        for nn in range(n):
                            for y in range(oh):
                                grow = dout[nn, oc, y]
                                xrow = xp[nn, c, y * sh + j]
                                for xo in range(ow):
                                    tmp[xo] += grow[xo] * xrow[xo * sw + k]
                    acc = zero
                    for xo in range(ow):
                        acc += tmp[xo]
                    dw[oc, c, j, k] = acc


# ---------------------------------------------------------------------------
# max pooling (argmax = absolute flat index into the input; ties keep the
# first element in row-major window order)


@njit(cache=True, nogil=True, parallel=True)
def maxpool3d_forward(x, kd, kh, kw, sd, sh, sw, out, argmax):
    n, c, d, h, wd = x.shape
    od, oh, ow = out.shape[2], out.shape[3], out.shape[4]
    for p in prange(n * c):
        nn = p // c
        cc = p % c
        for z in range(od):
            for y in range(oh):
                for xo in range(ow):
                    z0 = z * sd
                    y0 = y * sh
                    x0 = xo * sw
                    best = x[nn, cc, z0, y0, x0]
                    bi = (((nn * c + cc) * d + z0) * h + y0) * wd + x0
                    for i in range(kd):
                        for j in range(kh):
                            for k in range(kw):
                                v = x[nn, cc, z0 + i, y0 + j, x0 + k]
                                if v > best:
                                    best = v
                                    bi = (((nn * c + cc) * d + z0 + i) * h + y0 + j) * wd + x0 + k
                    out[nn, cc, z, y, xo] = best
                    argmax[nn, cc, z, y, xo] = bi


@njit(cache=True, nogil=True, parallel=True)
def maxpool2d_forward(x, kh, kw, sh, sw, out, argmax):
    n, c, h, wd = x.shape
    oh, ow = out.shape[2], out.shape[3]
    for p in prange(n * c):
        nn = p // c
        cc = p % c
        for y in range(oh):
            for xo in range(ow):
                y0 = y * sh
                x0 = xo * sw
                best = x[nn, cc, y0, x0]
                bi = ((nn * c + cc) * h + y0) * wd + x0
                for j in range(kh):
                    for k in range(kw):
                        v = x[nn, cc, y0 + j, x0 + k]
                        if v > best:
                            best = v
                            bi = ((nn * c + cc) * h + y0 + j) * wd + x0 + k
                out[nn, cc, y, xo] = best
                argmax[nn, cc, y, xo] = bi


@njit(cache=True, nogil=True, parallel=True)
def maxpool_bwd(dout_flat, argmax_flat, per_block, dx_flat):
    # argmax entries of block p all point inside block p of dx
    nblocks = dout_flat.size // per_block
    for p in prange(nblocks):
        for q in range(per_block):
            idx = p * per_block + q
            dx_flat[argmax_flat[idx]] += dout_flat[idx]


# ---------------------------------------------------------------------------
# transposed convolution, stride = kernel; the stored weight kernel may be
# larger than the active one (unused slab never read, its gradient stays 0)


@njit(cache=True, nogil=True, parallel=True)
def tconv3d_forward(x, w, b, ka, kb, kc, out):
    n, ci, d, h, wd = x.shape
    co = w.shape[1]
    zero = x.dtype.type(0)
    for p in prange(n * co):
        nn = p // co
        oc = p % co
        bv = b[oc]
        for zi in range(d):
            for yi in range(h):
                for a in range(ka):
                    for bb in range(kb):
                        orow = out[nn, oc, zi * ka + a, yi * kb + bb]
                        for q in range(wd * kc):
                            orow[q] = zero
                        for i in range(ci):
                            xrow = x[nn, i, zi, yi]
                            for cc in range(kc):
                                wv = w[i, oc, a, bb, cc]
                                for xi in range(wd):
                                    orow[xi * kc + cc] += wv * xrow[xi]
                        for q in range(wd * kc):
                            orow[q] += bv


@njit(cache=True, nogil=True, parallel=True)
def tconv3d_bwd_input(dout, w, ka, kb, kc, dx):
    n, ci, d, h, wd = dx.shape
    co = w.shape[1]
    zero = dout.dtype.type(0)
    for p in prange(n * ci):
        nn = p // ci
        i = p % ci
        for zi in range(d):
            for yi in range(h):
                drow = dx[nn, i, zi, yi]
                for xi in range(wd):
                    drow[xi] = zero
                for o in range(co):
                    for a in range(ka):
                        for bb in range(kb):
                            grow = dout[nn, o, zi * ka + a, yi * kb + bb]
                            for cc in range(kc):
                                wv = w[i, o, a, bb, cc]
                                for xi in range(wd):
                                    drow[xi] += wv * grow[xi * kc + cc]


@njit(cache=True, nogil=True, parallel=True)
def tconv3d_bwd_params(dout, x, ka, kb, kc, dw, db):
    n, ci, d, h, wd = x.shape
    co = dw.shape[1]
    zero = dout.dtype.type(0)
    for p in prange(ci * co):
        i = p // co
        o = p % co
        tmp = np.empty(wd, dout.dtype)
        for a in range(ka):
            for bb in range(kb):
                for cc in range(kc):
                    for xi in range(wd):
                        tmp[xi] = zero
                    for nn in range(n):
                        for zi in range(d):
                            for yi in range(h):
                                xrow = x[nn, i, zi, yi]
                                grow = dout[nn, o, zi * ka + a, yi * kb + bb]
                                for xi in range(wd):
                                    tmp[xi] += xrow[xi] * grow[xi * kc + cc]
                    acc = zero
                    for xi in range(wd):
                        acc += tmp[xi]
                    dw[i, o, a, bb, cc] = acc
    for o in prange(co):
        bacc = zero
        for nn in range(n):
            for z in range(dout.shape[2]):
                for y in range(dout.shape[3]):
                    grow = dout[nn, o, z, y]
                    for xo in range(dout.shape[4]):
                        bacc += grow[xo]
        db[o] = bacc


@njit(cache=True, nogil=True, parallel=True)
def tconv2d_forward(x, w, b, kb, kc, out):
    n, ci, h, wd = x.shape
    co = w.shape[1]
    zero = x.dtype.type(0)
    for p in prange(n * co):
        nn = p // co
        oc = p % co
        bv = b[oc]
        for yi in range(h):
            for bb in range(kb):
                orow = out[nn, oc, yi * kb + bb]
                for q in range(wd * kc):
                    orow[q] = zero
                for i in range(ci):
                    xrow = x[nn, i, yi]
                    for cc in range(kc):
                        wv = w[i, oc, bb, cc]
                        for xi in range(wd):
                            orow[xi * kc + cc] += wv * xrow[xi]
                for q in range(wd * kc):
                    orow[q] += bv


@njit(cache=True, nogil=True, parallel=True)
def tconv2d_bwd_input(dout, w, kb, kc, dx):
    n, ci, h, wd = dx.shape
    co = w.shape[1]
    zero = dout.dtype.type(0)
    for p in prange(n * ci):
        nn = p // ci
        i = p % ci
        for yi in range(h):
            drow = dx[nn, i, yi]
            for xi in range(wd):
                drow[xi] = zero
            for o in range(co):
                for bb in range(kb):
                    grow = dout[nn, o, yi * kb + bb]
                    for cc in range(kc):
                        wv = w[i, o, bb, cc]
                        for xi in range(wd):
                            drow[xi] += wv * grow[xi * kc + cc]


@njit(cache=True, nogil=True, parallel=True)
def tconv2d_bwd_params(dout, x, kb, kc, dw, db):
    n, ci, h, wd = x.shape
    co = dw.shape[1]
    zero = dout.dtype.type(0)
    for p in prange(ci * co):
        i = p // co
        o = p % co
        tmp = np.empty(wd, dout.dtype)
        for bb in range(kb):
            for cc in range(kc):
                for xi in range(wd):
                    tmp[xi] = zero
                for nn in range(n):
                    for yi in range(h):
                        xrow = x[nn, i, yi]
                        grow = dout[nn, o, yi * kb + bb]
                        for xi in range(wd):
                            tmp[xi] += xrow[xi] * grow[xi * kc + cc]
                acc = zero
                for xi in range(wd):
                    acc += tmp[xi]
                dw[i, o, bb, cc] = acc
    for o in prange(co):
        bacc = zero
        for nn in range(n):
            for y in range(dout.shape[2]):
                grow = dout[nn, o, y]
                for xo in range(dout.shape[3]):
                    bacc += grow[xo]
        db[o] = bacc


# ---------------------------------------------------------------------------
# exact squared Euclidean distance transform


@njit(cache=True, nogil=True)
def edt_sq(mask):
    # Felzenszwalb-Huttenlocher lower envelope on squared vertical runs.
    # Envelope positions use float64, but every emitted distance is a sum of
    # two exactly-representable squared integers, so results are exact.
    h, w = mask.shape
    inf = np.inf
    f = np.empty((h, w), dtype=np.float64)
    for x in range(w):
        run = EDT_NO_SOURCE
        for y in range(h):
            if mask[y, x]:
                run = 0
            elif run < EDT_NO_SOURCE:
                run += 1
            f[y, x] = run
        run = EDT_NO_SOURCE
        for y in range(h - 1, -1, -1):
            if mask[y, x]:
                run = 0
            elif run < EDT_NO_SOURCE:
                run += 1
            if run < f[y, x]:
                f[y, x] = run
    for x in range(w):
        for y in range(h):
            f[y, x] = inf if f[y, x] >= h else f[y, x] * f[y, x]
    out = np.empty((h, w), dtype=np.int64)
    v = np.empty(w, dtype=np.int64)
    z = np.empty(w + 1, dtype=np.float64)
    for y in range(h):
        k = -1
        for q in range(w):
            fq = f[y, q]
            if fq == inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -inf
                z[1] = inf
                continue
            s = ((fq + q * q) - (f[y, v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            while s <= z[k]:
                k -= 1
                s = ((fq + q * q) - (f[y, v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = inf
        if k < 0:
            for q in range(w):
                out[y, q] = EDT_NO_SOURCE
        else:
            kk = 0
            for q in range(w):
                while z[kk + 1] < q:
                    kk += 1
                dq = q - v[kk]
                out[y, q] = dq * dq + np.int64(f[y, v[kk]])
    return out
