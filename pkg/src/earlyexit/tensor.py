"""Dense numeric kernels: matmul, 2-D convolution and max pooling.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order. 4-D
tensors are laid out ``(batch, channels, height, width)``, 2-D tensors
``(batch, features)``. Every kernel is a pure function and returns a fresh
array; inputs are never modified.

Kernels compute in the floating dtype of their inputs (float32 for
training, float64 for gradient checks). Integer inputs are promoted to
float64.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError

Tensor = np.ndarray


def _result_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float64)


def _as(a, dtype):
    return np.asarray(a, dtype=dtype)


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def matmul(a, b):
    """c[i, j] = sum_p a[i, p] * b[p, j]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    dt = _result_dtype(a, b)
    return _as(a, dt) @ _as(b, dt)


def _check_conv(x, kernel, bias, stride, padding):
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D (N, C, H, W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-D (Cout, Cin, kh, kw), got shape {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d: kernel {kernel.shape} expects {kernel.shape[1]} input channels, input {x.shape} has {x.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
    kh, kw = kernel.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}"
        )


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


# Two patch layouts. "rows" builds one (N*H'*W', C*kh*kw) matrix and does a
# single GEMM; it suits small output planes. "planes" keeps (N, C*kh*kw, H'*W')
# and does one GEMM per sample, which lands directly in NCHW and is much
# faster when the output plane is large (e.g. the first layer on 28x28) or
# the layer has few output channels.
PLANES_MIN_OUTPUT = 256
PLANES_MAX_CHANNELS = 16


def _window(xp, i, j, stride, oh, ow):
    return xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]


def _patches(xp, kh, kw, stride, oh, ow):
    """Read-only view (N, C, H', W', kh, kw) of every receptive field."""
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return as_strided(xp, (n, c, oh, ow, kh, kw), (sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)


def _im2col(xp, kh, kw, stride):
    """Patch matrix of shape (N*H'*W', C*kh*kw), rows ordered (n, i, j)."""
    n, c, h, w = xp.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    win = _patches(xp, kh, kw, stride, oh, ow)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _im2planes(xp, kh, kw, stride, oh, ow):
    """Patches of shape (N, C*kh*kw, H'*W')."""
    n, c = xp.shape[:2]
    win = _patches(xp, kh, kw, stride, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)


def _use_planes(x_shape, kernel_shape, stride, padding):
    cout, _, kh, kw = kernel_shape
    oh = conv_output_size(x_shape[2], kh, stride, padding)
    ow = conv_output_size(x_shape[3], kw, stride, padding)
    return oh * ow >= PLANES_MIN_OUTPUT or cout <= PLANES_MAX_CHANNELS, oh, ow


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation (no kernel flip) plus per-output-channel bias.

    Output spatial size is ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    bias = None if bias is None else np.asarray(bias)
    _check_conv(x, kernel, bias, stride, padding)
    dt = _result_dtype(x, kernel)
    cout, _, kh, kw = kernel.shape
    n = x.shape[0]
    xp = _pad(_as(x, dt), padding)
    kmat = _as(kernel, dt).reshape(cout, -1)
    planes, oh, ow = _use_planes(x.shape, kernel.shape, stride, padding)
    if planes:
        out = (kmat @ _im2planes(xp, kh, kw, stride, oh, ow)).reshape(n, cout, oh, ow)
        if bias is not None:
            out += _as(bias, dt)[:, None, None]
        return out
    cols, _, _ = _im2col(xp, kh, kw, stride)
    out = cols @ kmat.T
    if bias is not None:
        out += _as(bias, dt)
    return np.ascontiguousarray(out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))


def conv2d_backward(x, kernel, grad_out, stride=1, padding=0, input_grad=True):
    """Gradients of ``conv2d`` w.r.t. input, kernel and bias.

    Returns ``(grad_x, grad_kernel, grad_bias)``; ``grad_x`` is None when
    ``input_grad`` is false (first layer of a network).
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    dt = _result_dtype(x, kernel)
    cout, cin, kh, kw = kernel.shape
    n, c, h, w = x.shape
    xp = _pad(_as(x, dt), padding)
    kmat = _as(kernel, dt).reshape(cout, -1)
    g = _as(grad_out, dt)
    planes, oh, ow = _use_planes(x.shape, kernel.shape, stride, padding)

    if planes:
        cols = _im2planes(xp, kh, kw, stride, oh, ow)
        gp = g.reshape(n, cout, oh * ow)
        grad_kernel = np.matmul(gp, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        grad_bias = gp.sum(axis=(0, 2))
        if not input_grad:
            return None, grad_kernel, grad_bias
        dcols = (kmat.T @ gp).reshape(n, cin, kh, kw, oh, ow)
        dxp = np.zeros(xp.shape, dtype=dt)
        for i in range(kh):
            for j in range(kw):
                _window(dxp, i, j, stride, oh, ow)[...] += dcols[:, :, i, j]
        return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]), grad_kernel, grad_bias

    cols, _, _ = _im2col(xp, kh, kw, stride)
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_kernel = (gmat.T @ cols).reshape(kernel.shape)
    grad_bias = gmat.sum(axis=0)
    if not input_grad:
        return None, grad_kernel, grad_bias
    # col2im in NHWC so every accumulated slice keeps channels innermost
    dcols = (gmat @ kmat).reshape(n, oh, ow, cin, kh, kw)
    dxp = np.zeros((n, xp.shape[2], xp.shape[3], c), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, :, i, j]
    grad_x = dxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


def maxpool2d(x, window, stride=None, return_index=True):
    """Max pooling over ``window x window`` patches.

    Returns ``(out, index)`` where ``index[n, c, i, j]`` is the flat position
    (within the H*W plane of channel ``c``) of the element selected for
    ``out[n, c, i, j]``. Ties resolve to the lowest flat index. With
    ``return_index=False`` the index is skipped and ``None`` is returned in
    its place.
    """
    x = np.asarray(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be 4-D (N, C, H, W), got shape {x.shape}")
    if window < 1 or stride < 1:
        raise DimensionError(f"maxpool2d: invalid window={window} / stride={stride}")
    h, w = x.shape[2:]
    if window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} exceeds spatial extent {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    if not return_index:
        return _pool_max(x, window, stride, oh, ow), None

    out, local = _pool_offsets(x, window, stride, oh, ow)
    rows = np.arange(oh)[:, None] * stride + local // window
    cols = np.arange(ow)[None, :] * stride + local % window
    return out, rows * w + cols


def _pool_max(x, window, stride, oh, ow):
    out = x[:, :, :stride * (oh - 1) + 1:stride, :stride * (ow - 1) + 1:stride].copy()
    for k in range(1, window * window):
        di, dj = divmod(k, window)
        np.maximum(out, x[:, :, di:di + stride * (oh - 1) + 1:stride, dj:dj + stride * (ow - 1) + 1:stride], out=out)
    return out


def _pool_offsets(x, window, stride, oh, ow):
    """Window maxima and the in-window offset (row-major) of the first maximum."""

    def patch(di, dj):
        return x[:, :, di:di + stride * (oh - 1) + 1:stride, dj:dj + stride * (ow - 1) + 1:stride]

    out = patch(0, 0).copy()
    for k in range(1, window * window):
        np.maximum(out, patch(*divmod(k, window)), out=out)
    # scan offsets high to low so the lowest matching offset is written last
    local = np.zeros(out.shape, dtype=np.intp)
    for k in range(window * window - 1, -1, -1):
        local = np.where(patch(*divmod(k, window)) == out, k, local)
    return out, local


def maxpool2d_backward(grad_out, index, input_shape, window, stride=None):
    """Route ``grad_out`` back to the argmax positions recorded by ``maxpool2d``."""
    stride = window if stride is None else stride
    n, c, h, w = input_shape
    g = np.asarray(grad_out)
    dx = np.zeros((n * c, h * w), dtype=g.dtype)
    idx = index.reshape(n * c, -1)
    vals = g.reshape(n * c, -1)
    if stride >= window:
        # windows are disjoint, so no two outputs share a source position
        np.put_along_axis(dx, idx, vals, axis=1)
    else:
        np.add.at(dx, (np.arange(n * c)[:, None], idx), vals)
    return dx.reshape(input_shape)
