"""Hot loops for convolution and pooling.

Two implementations of each kernel live here: a numba ``@njit`` version and a
pure-numpy version.  The module-level names (``im2col``, ``col2im``,
``maxpool_forward``, ``maxpool_backward``) are bound to one of them at import
time.  Set ``EENAS_DISABLE_NUMBA=1`` to force the numpy path; it is also used
automatically when numba cannot be imported.

Layout conventions: images are ``(N, C, H, W)``; column buffers are
``(N, C * K * K, H_out * W_out)`` with rows in channel-major ``(c, ki, kj)``
order, so a ``(C_out, C_in, K, K)`` weight reshaped to ``(C_out, -1)`` times a
column buffer gives the output already in ``(N, C_out, H_out * W_out)``.
"""

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _env_disabled():
    return os.environ.get("EENAS_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


USE_NUMBA = HAS_NUMBA and not _env_disabled()


def conv_out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def im2col_numpy(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, K, K) -> (N, C, K, K, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def col2im_numpy(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += cols[:, :, ki, kj]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def maxpool_forward_numpy(x, window):
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    xc = x[:, :, : ho * window, : wo * window]
    blocks = xc.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward_numpy(grad, arg, x_shape, window):
    n, c, h, w = x_shape
    ho, wo = grad.shape[2], grad.shape[3]
    blocks = np.zeros((n, c, ho, wo, window * window))
    np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    out = np.zeros((n, c, h, w))
    out[:, :, : ho * window, : wo * window] = blocks.reshape(n, c, ho * window, wo * window)
    return out


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @numba.njit(cache=True)
    def _valid_range(kj, stride, pad, wo, w):
        # output columns oj whose input column oj*stride + kj - pad lies in [0, w)
        lo = 0
        while lo < wo and lo * stride + kj - pad < 0:
            lo += 1
        hi = wo
        while hi > lo and (hi - 1) * stride + kj - pad >= w:
            hi -= 1
        return lo, hi

    @numba.njit(cache=True)
    def _im2col_nb(x, k, stride, pad, ho, wo, cols):
        n, c, h, w = x.shape
        lo = np.empty(k, dtype=np.int64)
        hi = np.empty(k, dtype=np.int64)
        for kj in range(k):
            lo[kj], hi[kj] = _valid_range(kj, stride, pad, wo, w)
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            base = oi * wo
                            for oj in range(lo[kj], hi[kj]):
                                cols[b, row, base + oj] = x[b, ch, ii, oj * stride + kj - pad]
        return cols

    @numba.njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, k, stride, pad, ho, wo, out):
        lo = np.empty(k, dtype=np.int64)
        hi = np.empty(k, dtype=np.int64)
        for kj in range(k):
            lo[kj], hi[kj] = _valid_range(kj, stride, pad, wo, w)
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            dst = out[b, ch, ii]
                            base = oi * wo
                            for oj in range(lo[kj], hi[kj]):
                                dst[oj * stride + kj - pad] += cols[b, row, base + oj]
        return out

    @numba.njit(cache=True)
    def _maxpool_fwd_nb(x, window):
        n, c, h, w = x.shape
        ho = h // window
        wo = w // window
        out = np.empty((n, c, ho, wo))
        arg = np.empty((n, c, ho, wo), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        best = x[b, ch, oi * window, oj * window]
                        best_idx = 0
                        for di in range(window):
                            for dj in range(window):
                                v = x[b, ch, oi * window + di, oj * window + dj]
                                if v > best:
                                    best = v
                                    best_idx = di * window + dj
                        out[b, ch, oi, oj] = best
                        arg[b, ch, oi, oj] = best_idx
        return out, arg

    @numba.njit(cache=True)
    def _maxpool_bwd_nb(grad, arg, window, out):
        n, c = out.shape[0], out.shape[1]
        ho = grad.shape[2]
        wo = grad.shape[3]
        for b in range(n):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        idx = arg[b, ch, oi, oj]
                        di = idx // window
                        dj = idx - di * window
                        out[b, ch, oi * window + di, oj * window + dj] += grad[b, ch, oi, oj]
        return out

    def im2col_numba(x, k, stride, pad):
        ho = conv_out_size(x.shape[2], k, stride, pad)
        wo = conv_out_size(x.shape[3], k, stride, pad)
        # numpy's zeroed allocation is lazy and much cheaper than numba's
        cols = np.zeros((x.shape[0], x.shape[1] * k * k, ho * wo))
        return _im2col_nb(np.ascontiguousarray(x), k, stride, pad, ho, wo, cols)

    def col2im_numba(cols, x_shape, k, stride, pad):
        n, c, h, w = x_shape
        ho = conv_out_size(h, k, stride, pad)
        wo = conv_out_size(w, k, stride, pad)
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad, ho, wo, np.zeros((n, c, h, w)))

    def maxpool_forward_numba(x, window):
        return _maxpool_fwd_nb(np.ascontiguousarray(x), window)

    def maxpool_backward_numba(grad, arg, x_shape, window):
        n, c, h, w = x_shape
        return _maxpool_bwd_nb(np.ascontiguousarray(grad), arg, window, np.zeros((n, c, h, w)))


# im2col is one strided copy in numpy; the numba loop does not beat it
im2col = im2col_numpy
if USE_NUMBA:
    col2im = col2im_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
else:
    col2im = col2im_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
