"""Backend-dispatched hot kernels.

Every function here has a numba-jitted implementation and a pure-numpy
fallback; `dendriteseg.backend` decides which one runs. Shapes are computed
and output buffers allocated here so both implementations stay minimal.

Conventions: 3D activations are (N, C, D, H, W), 2D are (N, C, H, W).
Convolution weights are (C_out, C_in, *kernel); transposed-convolution
weights are (C_in, C_out, *kernel) and always store the full kernel even
when a call uses a smaller leading-depth slab.
"""

import numpy as np

from .. import backend
from . import numpy_impl
from .numpy_impl import EDT_NO_SOURCE

if backend.HAS_NUMBA:
    from . import numba_impl
else:  # pragma: no cover
    numba_impl = None


def _use_numba() -> bool:
    return backend.active_backend() == "numba"


def conv_out_spatial(in_spatial, kernel, stride, pad):
    return tuple(
        (i + 2 * p - k) // s + 1 for i, k, s, p in zip(in_spatial, kernel, stride, pad)
    )


def _pad_spatial(x, pad):
    if not any(pad):
        return x
    width = ((0, 0), (0, 0)) + tuple((p, p) for p in pad)
    return np.pad(x, width)


def conv3d_forward(x, w, b, stride, pad):
    if _use_numba():
        n, co = x.shape[0], w.shape[0]
        od, oh, ow = conv_out_spatial(x.shape[2:], w.shape[2:], stride, pad)
        out = np.empty((n, co, od, oh, ow), dtype=x.dtype)
        numba_impl.conv3d_forward(_pad_spatial(x, pad), w, b, *stride, out)
        return out
    return numpy_impl.conv3d_forward(x, w, b, stride, pad)


def conv3d_bwd_input(dout, w, stride, pad, in_spatial):
    if _use_numba():
        pd, ph, pw = pad
        d, h, wd = in_spatial
        dxp = np.zeros(
            (dout.shape[0], w.shape[1], d + 2 * pd, h + 2 * ph, wd + 2 * pw),
            dtype=dout.dtype,
        )
        numba_impl.conv3d_bwd_input(dout, w, *stride, dxp)
        if not any(pad):
            return dxp
        return np.ascontiguousarray(dxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wd])
    return numpy_impl.conv3d_bwd_input(dout, w, stride, pad, in_spatial)


def conv3d_bwd_params(dout, x, w_shape, stride, pad):
    if _use_numba():
        dw = np.empty(w_shape, dtype=dout.dtype)
        db = np.empty(w_shape[0], dtype=dout.dtype)
        numba_impl.conv3d_bwd_params(dout, _pad_spatial(x, pad), *stride, dw, db)
        return dw, db
    return numpy_impl.conv3d_bwd_params(dout, x, w_shape, stride, pad)


def conv2d_forward(x, w, b, stride, pad):
    if _use_numba():
        n, co = x.shape[0], w.shape[0]
        oh, ow = conv_out_spatial(x.shape[2:], w.shape[2:], stride, pad)
        out = np.empty((n, co, oh, ow), dtype=x.dtype)
        numba_impl.conv2d_forward(_pad_spatial(x, pad), w, b, *stride, out)
        return out
    return numpy_impl.conv2d_forward(x, w, b, stride, pad)


def conv2d_bwd_input(dout, w, stride, pad, in_spatial):
    if _use_numba():
        ph, pw = pad
        h, wd = in_spatial
        dxp = np.zeros(
            (dout.shape[0], w.shape[1], h + 2 * ph, wd + 2 * pw), dtype=dout.dtype
        )
        numba_impl.conv2d_bwd_input(dout, w, *stride, dxp)
        if not any(pad):
            return dxp
        return np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + wd])
    return numpy_impl.conv2d_bwd_input(dout, w, stride, pad, in_spatial)


def conv2d_bwd_params(dout, x, w_shape, stride, pad):
    if _use_numba():
        dw = np.empty(w_shape, dtype=dout.dtype)
        db = np.empty(w_shape[0], dtype=dout.dtype)
        numba_impl.conv2d_bwd_params(dout, _pad_spatial(x, pad), *stride, dw, db)
        return dw, db
    return numpy_impl.conv2d_bwd_params(dout, x, w_shape, stride, pad)


def maxpool3d_forward(x, kernel, stride):
    if _use_numba():
        n, c = x.shape[:2]
        od, oh, ow = conv_out_spatial(x.shape[2:], kernel, stride, (0, 0, 0))
        out = np.empty((n, c, od, oh, ow), dtype=x.dtype)
        argmax = np.empty((n, c, od, oh, ow), dtype=np.int64)
        numba_impl.maxpool3d_forward(x, *kernel, *stride, out, argmax)
        return out, argmax
    return numpy_impl.maxpool3d_forward(x, kernel, stride)


def maxpool2d_forward(x, kernel, stride):
    if _use_numba():
        n, c = x.shape[:2]
        oh, ow = conv_out_spatial(x.shape[2:], kernel, stride, (0, 0))
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        argmax = np.empty((n, c, oh, ow), dtype=np.int64)
        numba_impl.maxpool2d_forward(x, *kernel, *stride, out, argmax)
        return out, argmax
    return numpy_impl.maxpool2d_forward(x, kernel, stride)


def maxpool_bwd(dout, argmax, x_shape):
    if _use_numba():
        n, c = x_shape[:2]
        dx = np.zeros(int(np.prod(np.array(x_shape))), dtype=dout.dtype)
        per_block = dout.size // (n * c)
        numba_impl.maxpool_bwd(dout.ravel(), argmax.ravel(), per_block, dx)
        return dx.reshape(x_shape)
    return numpy_impl.maxpool_bwd(dout, argmax, x_shape)


def tconv3d_forward(x, w, b, kernel):
    if _use_numba():
        n, co = x.shape[0], w.shape[1]
        d, h, wd = x.shape[2:]
        ka, kb, kc = kernel
        out = np.empty((n, co, d * ka, h * kb, wd * kc), dtype=x.dtype)
        numba_impl.tconv3d_forward(x, w, b, *kernel, out)
        return out
    return numpy_impl.tconv3d_forward(x, w, b, kernel)


def tconv3d_bwd_input(dout, w, kernel, in_spatial):
    if _use_numba():
        dx = np.empty((dout.shape[0], w.shape[0]) + tuple(in_spatial), dtype=dout.dtype)
        numba_impl.tconv3d_bwd_input(dout, w, *kernel, dx)
        return dx
    return numpy_impl.tconv3d_bwd_input(dout, w, kernel, in_spatial)


def tconv3d_bwd_params(dout, x, w_shape, kernel):
    if _use_numba():
        dw = np.zeros(w_shape, dtype=dout.dtype)
        db = np.empty(w_shape[1], dtype=dout.dtype)
        numba_impl.tconv3d_bwd_params(dout, x, *kernel, dw, db)
        return dw, db
    return numpy_impl.tconv3d_bwd_params(dout, x, w_shape, kernel)


def tconv2d_forward(x, w, b, kernel):
    if _use_numba():
        n, co = x.shape[0], w.shape[1]
        h, wd = x.shape[2:]
        kb, kc = kernel
        out = np.empty((n, co, h * kb, wd * kc), dtype=x.dtype)
        numba_impl.tconv2d_forward(x, w, b, *kernel, out)
        return out
    return numpy_impl.tconv2d_forward(x, w, b, kernel)


def tconv2d_bwd_input(dout, w, kernel, in_spatial):
    if _use_numba():
        dx = np.empty((dout.shape[0], w.shape[0]) + tuple(in_spatial), dtype=dout.dtype)
        numba_impl.tconv2d_bwd_input(dout, w, *kernel, dx)
        return dx
    return numpy_impl.tconv2d_bwd_input(dout, w, kernel, in_spatial)


def tconv2d_bwd_params(dout, x, w_shape, kernel):
    if _use_numba():
        dw = np.zeros(w_shape, dtype=dout.dtype)
        db = np.empty(w_shape[1], dtype=dout.dtype)
        numba_impl.tconv2d_bwd_params(dout, x, *kernel, dw, db)
        return dw, db
    return numpy_impl.tconv2d_bwd_params(dout, x, w_shape, kernel)


def edt_sq(mask):
    """Exact squared Euclidean distance to the nearest True pixel.

    Cells with no source pixel anywhere evaluate to EDT_NO_SOURCE.
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _use_numba():
        return numba_impl.edt_sq(mask)
    return numpy_impl.edt_sq(mask)
