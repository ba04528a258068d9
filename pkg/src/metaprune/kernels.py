"""Hot numeric kernels: window packing for convolution and 2x2 max pooling.

Convolutions are computed as im2col + BLAS matmul (the matmul lives in the
autodiff ops); the packing/scatter loops here are the hot non-BLAS part.
Two interchangeable backends are provided:

  * numba ``@njit`` loops (default whenever numba imports cleanly)
  * pure numpy (stride tricks + slice arithmetic)

Select explicitly with ``METAPRUNE_BACKEND=numpy`` or ``=numba``. Both
backends produce identical column matrices and accumulate scatter-adds in
the same order, so results agree bitwise. ``benchmarks/bench_kernels.py``
compares their throughput.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ENV_FLAG = "METAPRUNE_BACKEND"


# ---------------------------------------------------------------------------
# pure numpy backend
# ---------------------------------------------------------------------------

def _np_im2col(xpad, k, stride, out_h, out_w):
    b, c = xpad.shape[0], xpad.shape[1]
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, out_h, out_w, k, k) -> (B, out_h, out_w, C, k, k), then flatten
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * out_h * out_w, c * k * k)
    return np.ascontiguousarray(cols)


def _np_col2im(dcols, b, c, hp, wp, k, stride, out_h, out_w):
    dxpad = np.zeros((b, c, hp, wp), dtype=np.float64)
    d = dcols.reshape(b, out_h, out_w, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for dy in range(k):
        for dx in range(k):
            dxpad[:, :, dy:dy + stride * out_h:stride,
                  dx:dx + stride * out_w:stride] += d[:, :, :, :, dy, dx]
    return dxpad


def _np_maxpool2x2(x):
    b, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    v = x[:, :, :2 * oh, :2 * ow]
    # candidate order (dy, dx) = (0,0), (0,1), (1,0), (1,1); argmax keeps the first
    cand = np.stack(
        [v[:, :, 0::2, 0::2], v[:, :, 0::2, 1::2],
         v[:, :, 1::2, 0::2], v[:, :, 1::2, 1::2]], axis=-1)
    idx = np.argmax(cand, axis=-1).astype(np.uint8)
    out = np.take_along_axis(cand, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _np_maxpool2x2_backward(dout, idx, h, w):
    b, c, oh, ow = dout.shape
    dx = np.zeros((b, c, h, w), dtype=np.float64)
    dy_off = (idx >> 1).astype(np.intp)
    dx_off = (idx & 1).astype(np.intp)
    bi, ci, yi, xi = np.indices((b, c, oh, ow), dtype=np.intp)
    dx[bi, ci, 2 * yi + dy_off, 2 * xi + dx_off] = dout
    return dx


_NUMPY_IMPL = {
    "im2col": _np_im2col,
    "col2im": _np_col2im,
    "maxpool2x2": _np_maxpool2x2,
    "maxpool2x2_backward": _np_maxpool2x2_backward,
}


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def nb_im2col(xpad, k, stride, out_h, out_w):
        b, c = xpad.shape[0], xpad.shape[1]
        cols = np.empty((b * out_h * out_w, c * k * k), dtype=np.float64)
        for bb in range(b):
            for y in range(out_h):
                for x in range(out_w):
                    row = (bb * out_h + y) * out_w + x
                    col = 0
                    for i in range(c):
                        for dy in range(k):
                            for dx in range(k):
                                cols[row, col] = xpad[bb, i, y * stride + dy, x * stride + dx]
                                col += 1
        return cols

    @njit(cache=True)
    def nb_col2im(dcols, b, c, hp, wp, k, stride, out_h, out_w):
        dxpad = np.zeros((b, c, hp, wp), dtype=np.float64)
        # (dy, dx) outermost keeps the accumulation order identical to the
        # numpy slice version, so both backends agree bitwise
        for dy in range(k):
            for dx in range(k):
                for bb in range(b):
                    for i in range(c):
                        for y in range(out_h):
                            for x in range(out_w):
                                row = (bb * out_h + y) * out_w + x
                                dxpad[bb, i, y * stride + dy, x * stride + dx] += \
                                    dcols[row, (i * k + dy) * k + dx]
        return dxpad

    @njit(cache=True)
    def nb_maxpool2x2(x):
        b, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        out = np.empty((b, c, oh, ow), dtype=np.float64)
        idx = np.empty((b, c, oh, ow), dtype=np.uint8)
        for bb in range(b):
            for i in range(c):
                for y in range(oh):
                    for x in range(ow):
                        best = x0 = x[bb, i, 2 * y, 2 * x] if False else 0.0
                        best = x[bb, i, 2 * y, 2 * x]
                        pos = np.uint8(0)
                        p = np.uint8(1)
                        for dy in range(2):
                            for dx in range(2):
                                if dy == 0 and dx == 0:
                                    continue
                                v = x[bb, i, 2 * y + dy, 2 * x + dx]
                                if v > best:
                                    best = v
                                    pos = np.uint8(2 * dy + dx)
                                p += np.uint8(1)
                        out[bb, i, y, x] = best
                        idx[bb, i, y, x] = pos
        return out, idx

    @njit(cache=True)
    def nb_maxpool2x2_backward(dout, idx, h, w):
        b, c, oh, ow = dout.shape
        dx = np.zeros((b, c, h, w), dtype=np.float64)
        for bb in range(b):
            for i in range(c):
                for y in range(oh):
                    for x in range(ow):
                        pos = idx[bb, i, y, x]
                        dx[bb, i, 2 * y + (pos >> 1), 2 * x + (pos & 1)] = dout[bb, i, y, x]
        return dx

    return {
        "im2col": nb_im2col,
        "col2im": nb_col2im,
        "maxpool2x2": nb_maxpool2x2,
        "maxpool2x2_backward": nb_maxpool2x2_backward,
    }


def _select_backend():
    choice = os.environ.get(_ENV_FLAG, "").strip().lower()
    if choice not in ("", "numpy", "numba"):
        raise ValueError(f"{_ENV_FLAG} must be 'numpy' or 'numba', got {choice!r}")
    if choice == "numpy":
        return "numpy", _NUMPY_IMPL
    try:
        impl = _build_numba_impl()
        return "numba", impl
    except ImportError:
        if choice == "numba":
            raise
        return "numpy", _NUMPY_IMPL


BACKEND, _IMPL = _select_backend()

im2col = _IMPL["im2col"]
col2im = _IMPL["col2im"]
maxpool2x2 = _IMPL["maxpool2x2"]
maxpool2x2_backward = _IMPL["maxpool2x2_backward"]


def backend_impls():
    """Both backend implementations, for the benchmark and parity tests."""
    impls = {"numpy": _NUMPY_IMPL}
    try:
        impls["numba"] = _build_numba_impl()
    except ImportError:
        pass
    return impls


# ---------------------------------------------------------------------------
# shared convolution plumbing (BLAS matmul, backend-independent)
# ---------------------------------------------------------------------------

def conv2d_shapes(x_shape, w_shape, stride, padding):
    b, cin, h, w = x_shape
    cout, cink, kh, kw = w_shape
    if kh != kw:
        raise ValueError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    if cin != cink:
        raise ValueError(
            f"conv2d: input has {cin} channels but kernels expect {cink} "
            f"(input {tuple(x_shape)}, kernels {tuple(w_shape)})")
    k = kh
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(
            f"conv2d: kernel size {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    return b, cin, cout, k, out_h, out_w


def conv2d_forward(x, w, stride=1, padding=0):
    """Cross-correlation of x[B,Cin,H,W] with kernels w[Cout,Cin,k,k]."""
    b, cin, cout, k, out_h, out_w = conv2d_shapes(x.shape, w.shape, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = im2col(x, k, stride, out_h, out_w)
    out = cols @ w.reshape(cout, cin * k * k).T
    return out.reshape(b, out_h, out_w, cout).transpose(0, 3, 1, 2), cols


def conv2d_backward(dout, cols, x_shape, w, stride, padding,
                    need_dx=True, need_dw=True):
    """Gradients of conv2d_forward w.r.t. input and kernels."""
    b, cin, h, win = x_shape
    cout, _, k, _ = w.shape
    out_h, out_w = dout.shape[2], dout.shape[3]
    dout_mat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, cout)
    dx = dw = None
    if need_dw:
        dw = (dout_mat.T @ cols).reshape(w.shape)
    if need_dx:
        dcols = dout_mat @ w.reshape(cout, cin * k * k)
        hp, wp = h + 2 * padding, win + 2 * padding
        dxpad = col2im(dcols, b, cin, hp, wp, k, stride, out_h, out_w)
        dx = dxpad[:, :, padding:padding + h, padding:padding + win] if padding else dxpad
        dx = np.ascontiguousarray(dx)
    return dx, dw
