"""Pure-numpy kernel implementations.

Convolutions go through an explicit im2col + matmul so that a 3D call with a
depth-1 kernel on a depth-1 input builds the exact same column matrix as the
2D call and therefore produces bitwise-identical output. Backward-input uses
a small loop over kernel offsets with strided accumulation instead of a
scatter, which keeps it vectorized and deterministic.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Squared-distance value standing in for "no source pixel"; larger than any
# real squared distance at slice scale but far from int64 overflow.
EDT_NO_SOURCE = np.int64(1) << 40


# ---------------------------------------------------------------------------
# convolution


def conv3d_forward(x, w, b, stride, pad):
    n, ci, d, h, wd = x.shape
    co = w.shape[0]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    pd, ph, pw = pad
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    od, oh, ow = win.shape[2:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * od * oh * ow, ci * kd * kh * kw)
    out = cols @ w.reshape(co, -1).T
    out = np.ascontiguousarray(out.reshape(n, od, oh, ow, co).transpose(0, 4, 1, 2, 3))
    out += b.reshape(1, co, 1, 1, 1)
    return out


def conv3d_bwd_input(dout, w, stride, pad, in_spatial):
    n, co = dout.shape[:2]
    od, oh, ow = dout.shape[2:]
    ci = w.shape[1]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    pd, ph, pw = pad
    d, h, wd = in_spatial
    dxp = np.zeros((n, ci, d + 2 * pd, h + 2 * ph, wd + 2 * pw), dtype=dout.dtype)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                t = np.tensordot(dout, w[:, :, i, j, k], axes=([1], [0]))
                dxp[:, :, i : i + sd * od : sd, j : j + sh * oh : sh, k : k + sw * ow : sw] += (
                    t.transpose(0, 4, 1, 2, 3)
                )
    return np.ascontiguousarray(dxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wd])


def conv3d_bwd_params(dout, x, w_shape, stride, pad):
    n, ci = x.shape[:2]
    co = dout.shape[1]
    od, oh, ow = dout.shape[2:]
    kd, kh, kw = w_shape[2:]
    sd, sh, sw = stride
    pd, ph, pw = pad
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * od * oh * ow, ci * kd * kh * kw)
    dout_mat = dout.transpose(1, 0, 2, 3, 4).reshape(co, -1)
    dw = (dout_mat @ cols).reshape(w_shape)
    db = dout.sum(axis=(0, 2, 3, 4))
    return dw, db


def conv2d_forward(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co = w.shape[0]
    kh, kw = w.shape[2:]
    sh, sw = stride
    ph, pw = pad
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    oh, ow = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ci * kh * kw)
    out = cols @ w.reshape(co, -1).T
    out = np.ascontiguousarray(out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))
    out += b.reshape(1, co, 1, 1)
    return out


def conv2d_bwd_input(dout, w, stride, pad, in_spatial):
    n, co = dout.shape[:2]
    oh, ow = dout.shape[2:]
    ci = w.shape[1]
    kh, kw = w.shape[2:]
    sh, sw = stride
    ph, pw = pad
    h, wd = in_spatial
    dxp = np.zeros((n, ci, h + 2 * ph, wd + 2 * pw), dtype=dout.dtype)
    for j in range(kh):
        for k in range(kw):
            t = np.tensordot(dout, w[:, :, j, k], axes=([1], [0]))
            dxp[:, :, j : j + sh * oh : sh, k : k + sw * ow : sw] += t.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + wd])


def conv2d_bwd_params(dout, x, w_shape, stride, pad):
    n, ci = x.shape[:2]
    co = dout.shape[1]
    oh, ow = dout.shape[2:]
    kh, kw = w_shape[2:]
    sh, sw = stride
    ph, pw = pad
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ci * kh * kw)
    dout_mat = dout.transpose(1, 0, 2, 3).reshape(co, -1)
    dw = (dout_mat @ cols).reshape(w_shape)
    db = dout.sum(axis=(0, 2, 3))
    return dw, db


# ---------------------------------------------------------------------------
# max pooling (argmax is the absolute flat index into the input, first
# occurrence within the window in row-major window order)


def maxpool3d_forward(x, kernel, stride):
    n, c, d, h, wd = x.shape
    kd, kh, kw = kernel
    sd, sh, sw = stride
    win = sliding_window_view(x, kernel, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    od, oh, ow = win.shape[2:5]
    flat = win.reshape(n, c, od, oh, ow, kd * kh * kw)
    aw = flat.argmax(axis=-1)
    out = np.ascontiguousarray(np.take_along_axis(flat, aw[..., None], axis=-1)[..., 0])
    i = aw // (kh * kw)
    j = (aw % (kh * kw)) // kw
    k = aw % kw
    zz = np.arange(od, dtype=np.int64).reshape(1, 1, od, 1, 1) * sd + i
    yy = np.arange(oh, dtype=np.int64).reshape(1, 1, 1, oh, 1) * sh + j
    xx = np.arange(ow, dtype=np.int64).reshape(1, 1, 1, 1, ow) * sw + k
    nn = np.arange(n, dtype=np.int64).reshape(n, 1, 1, 1, 1)
    cc = np.arange(c, dtype=np.int64).reshape(1, c, 1, 1, 1)
    argmax = (((nn * c + cc) * d + zz) * h + yy) * wd + xx
    return out, argmax


def maxpool2d_forward(x, kernel, stride):
    n, c, h, wd = x.shape
    kh, kw = kernel
    sh, sw = stride
    win = sliding_window_view(x, kernel, axis=(2, 3))[:, :, ::sh, ::sw]
    oh, ow = win.shape[2:4]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    aw = flat.argmax(axis=-1)
    out = np.ascontiguousarray(np.take_along_axis(flat, aw[..., None], axis=-1)[..., 0])
    j = aw // kw
    k = aw % kw
    yy = np.arange(oh, dtype=np.int64).reshape(1, 1, oh, 1) * sh + j
    xx = np.arange(ow, dtype=np.int64).reshape(1, 1, 1, ow) * sw + k
    nn = np.arange(n, dtype=np.int64).reshape(n, 1, 1, 1)
    cc = np.arange(c, dtype=np.int64).reshape(1, c, 1, 1)
    argmax = ((nn * c + cc) * h + yy) * wd + xx
    return out, argmax


def maxpool_bwd(dout, argmax, x_shape):
    dx = np.zeros(int(np.prod(x_shape)), dtype=dout.dtype)
    np.add.at(dx, argmax.ravel(), dout.ravel())
    return dx.reshape(x_shape)


# ---------------------------------------------------------------------------
# transposed convolution, stride = kernel, kernel entries may be smaller than
# the stored weight (the unused trailing slab of w is simply not read and its
# gradient stays zero)


def tconv3d_forward(x, w, b, kernel):
    n, ci, d, h, wd = x.shape
    co = w.shape[1]
    ka, kb, kc = kernel
    ws = w[:, :, :ka, :kb, :kc]
    out = np.einsum("nidhw,ioabc->nodahbwc", x, ws).reshape(n, co, d * ka, h * kb, wd * kc)
    out = np.ascontiguousarray(out)
    out += b.reshape(1, co, 1, 1, 1)
    return out


def tconv3d_bwd_input(dout, w, kernel, in_spatial):
    n, co = dout.shape[:2]
    d, h, wd = in_spatial
    ka, kb, kc = kernel
    ws = w[:, :, :ka, :kb, :kc]
    dout6 = dout.reshape(n, co, d, ka, h, kb, wd, kc)
    return np.ascontiguousarray(np.einsum("nodahbwc,ioabc->nidhw", dout6, ws))


def tconv3d_bwd_params(dout, x, w_shape, kernel):
    n, ci, d, h, wd = x.shape
    co = dout.shape[1]
    ka, kb, kc = kernel
    dout6 = dout.reshape(n, co, d, ka, h, kb, wd, kc)
    dw = np.zeros(w_shape, dtype=dout.dtype)
    dw[:, :, :ka, :kb, :kc] = np.einsum("nidhw,nodahbwc->ioabc", x, dout6)
    db = dout.sum(axis=(0, 2, 3, 4))
    return dw, db


def tconv2d_forward(x, w, b, kernel):
    n, ci, h, wd = x.shape
    co = w.shape[1]
    kb, kc = kernel
    ws = w[:, :, :kb, :kc]
    out = np.einsum("nihw,iobc->nohbwc", x, ws).reshape(n, co, h * kb, wd * kc)
    out = np.ascontiguousarray(out)
    out += b.reshape(1, co, 1, 1)
    return out


def tconv2d_bwd_input(dout, w, kernel, in_spatial):
    n, co = dout.shape[:2]
    h, wd = in_spatial
    kb, kc = kernel
    ws = w[:, :, :kb, :kc]
    dout6 = dout.reshape(n, co, h, kb, wd, kc)
    return np.ascontiguousarray(np.einsum("nohbwc,iobc->nihw", dout6, ws))


def tconv2d_bwd_params(dout, x, w_shape, kernel):
    n, ci, h, wd = x.shape
    co = dout.shape[1]
    kb, kc = kernel
    dout6 = dout.reshape(n, co, h, kb, wd, kc)
    dw = np.zeros(w_shape, dtype=dout.dtype)
    dw[:, :, :kb, :kc] = np.einsum("nihw,nohbwc->iobc", x, dout6)
    db = dout.sum(axis=(0, 2, 3))
    return dw, db


# ---------------------------------------------------------------------------
# exact squared Euclidean distance transform (distance to the nearest True
# pixel). Separable: vertical run lengths per column, then a min-reduction
# over horizontal offsets per row. All arithmetic on int64, so results are
# exact; cells with no source anywhere evaluate to >= EDT_NO_SOURCE.


def edt_sq(mask):
    h, w = mask.shape
    d1 = np.empty((h, w), dtype=np.int64)
    run = np.full(w, EDT_NO_SOURCE, dtype=np.int64)
    for i in range(h):
        run = np.where(mask[i], 0, np.minimum(run + 1, EDT_NO_SOURCE))
        d1[i] = run
    run = np.full(w, EDT_NO_SOURCE, dtype=np.int64)
    for i in range(h - 1, -1, -1):
        run = np.where(mask[i], 0, np.minimum(run + 1, EDT_NO_SOURCE))
        d1[i] = np.minimum(d1[i], run)
    d1sq = np.where(d1 >= h, EDT_NO_SOURCE, d1 * d1)
    offs = (np.arange(w, dtype=np.int64)[:, None] - np.arange(w, dtype=np.int64)[None, :]) ** 2
    out = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        out[i] = np.min(d1sq[i][None, :] + offs, axis=1)
    return out
