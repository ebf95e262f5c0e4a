"""Volumetric primitives: conv3d, pooling, trilinear resizing."""
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, _record, as_tensor


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv_output_shape(spatial, kernel, stride, padding):
    return tuple((s + 2 * p - k) // st + 1 for s, k, st, p in zip(spatial, kernel, stride, padding))


def conv3d(x, w, stride=1, padding=0):
    """3D cross-correlation of ``x`` [N,C,D,H,W] with ``w`` [F,C,kd,kh,kw].

    Patches are gathered once into a column matrix, so forward and both
    backward products are single GEMMs; the columns are kept for the
    weight gradient.
    """
    x, w = as_tensor(x), as_tensor(w)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if min(stride) < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, c = x.shape[:2]
    f = w.shape[0]
    ksize = w.shape[2:]
    padded = tuple(s + 2 * p for s, p in zip(x.shape[2:], padding))
    if any(k > p for k, p in zip(ksize, padded)):
        raise DimensionError(f"kernel {w.shape} larger than padded input {padded}")
    out_sp = conv_output_shape(x.shape[2:], ksize, stride, padding)

    # channel-major padded copy: columns are (C*kd*kh*kw, N*D'*H'*W')
    xt = np.zeros((c, n) + padded)
    inner = tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))
    xt[(slice(None), slice(None)) + inner] = x.data.transpose(1, 0, 2, 3, 4)
    m = n * int(np.prod(out_sp))
    kvol = int(np.prod(ksize))
    offsets = list(itertools.product(*(range(k) for k in ksize)))

    def window(arr, off):
        return arr[
            :,
            :,
            off[0] : off[0] + stride[0] * out_sp[0] : stride[0],
            off[1] : off[1] + stride[1] * out_sp[1] : stride[1],
            off[2] : off[2] + stride[2] * out_sp[2] : stride[2],
        ]

    view = sliding_window_view(xt, ksize, axis=(2, 3, 4))[
        :, :, :: stride[0], :: stride[1], :: stride[2]
    ][:, :, : out_sp[0], : out_sp[1], : out_sp[2]]
    cols = np.ascontiguousarray(view.transpose(0, 5, 6, 7, 1, 2, 3, 4)).reshape(c * kvol, m)
    wmat = w.data.reshape(f, c * kvol)
    result = (wmat @ cols).reshape((f, n) + out_sp).transpose(1, 0, 2, 3, 4)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(f, m)
        if w.requires_grad:
            w._accumulate((gm @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape((c, kvol, n) + out_sp)
            gxt = np.zeros((c, n) + padded)
            for i, off in enumerate(offsets):
                window(gxt, off)[...] += dcols[:, i]
            x._accumulate(gxt[(slice(None), slice(None)) + inner].transpose(1, 0, 2, 3, 4))

    return _record(np.ascontiguousarray(result), (x, w), backward)


def _pool_view(x, size):
    n, c, d, h, w = x.shape
    kd, kh, kw = size
    if d % kd or h % kh or w % kw:
        raise DimensionError(f"pool size {size} does not divide spatial dims {x.shape[2:]}")
    return x.reshape(n, c, d // kd, kd, h // kh, kh, w // kw, kw)


def avg_pool3d(x, size):
    """Non-overlapping average pooling (stride = window)."""
    size = _triple(size)
    v = _pool_view(x.data, size)
    out = v.mean(axis=(3, 5, 7))
    scale = 1.0 / np.prod(size)

    def backward(g):
        gv = np.broadcast_to(g[:, :, :, None, :, None, :, None] * scale, v.shape)
        x._accumulate(gv.reshape(x.shape))

    return _record(out, (x,), backward)


def max_pool3d(x, size):
    """Non-overlapping max pooling; ties share the gradient equally."""
    size = _triple(size)
    v = _pool_view(x.data, size)
    out = v.max(axis=(3, 5, 7))
    mask = v == out[:, :, :, None, :, None, :, None]
    mask = mask / mask.sum(axis=(3, 5, 7), keepdims=True)

    def backward(g):
        x._accumulate((mask * g[:, :, :, None, :, None, :, None]).reshape(x.shape))

    return _record(out, (x,), backward)


def global_avg_pool3d(x):
    """[N,C,D,H,W] -> [N,C]."""
    n, c = x.shape[:2]
    vol = float(np.prod(x.shape[2:]))
    out = x.data.reshape(n, c, -1).mean(axis=2)

    def backward(g):
        x._accumulate(np.broadcast_to((g / vol)[:, :, None, None, None], x.shape))

    return _record(out, (x,), backward)


def _linear_weights(n_in, n_out):
    """Half-pixel-centred linear interpolation indices/weights along one axis."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def trilinear_resize(volume, out_shape):
    """Trilinear resampling of a 3-D numpy array to ``out_shape``.

    Separable, half-pixel aligned, edge-clamped. Constant fields stay
    exactly constant: the update is ``a + (b - a) * frac``.
    """
    arr = np.asarray(volume, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError(f"trilinear_resize expects a 3-D array, got {arr.shape}")
    for axis, n_out in enumerate(out_shape):
        lo, hi, frac = _linear_weights(arr.shape[axis], int(n_out))
        a = np.take(arr, lo, axis=axis)
        b = np.take(arr, hi, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = -1
        frac = frac.reshape(shape)
        arr = a + (b - a) * frac
    return arr


__all__ = [
    "conv3d",
    "avg_pool3d",
    "max_pool3d",
    "global_avg_pool3d",
    "trilinear_resize",
    "conv_output_shape",
]
