"""Forward and backward kernels for dense, convolution and max-pool layers.

Activations are channels-last: ``(batch, height, width, channels)``.
Convolutions are valid (no padding) cross-correlations.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Bytes allowed for one im2col buffer before the batch is split.
_PATCH_BUDGET = 64 * 2**20


def _chunks(n_items, bytes_per_item):
    step = max(1, _PATCH_BUDGET // max(1, bytes_per_item))
    for start in range(0, n_items, step):
        yield slice(start, min(n_items, start + step))


def conv_output_shape(in_shape, kh, kw):
    H, W = in_shape[:2]
    return H - kh + 1, W - kw + 1


def _column_patches(x, kh, c, Wo):
    """im2col rows for kernel column ``c``: shape ``(B*Ho*Wo, C*kh)``."""
    cols = x[:, :, c:c + Wo, :]
    win = sliding_window_view(cols, kh, axis=1)  # (B, Ho, Wo, C, kh)
    return win.reshape(-1, win.shape[3] * kh)


def _banded(w, H, Ho):
    """Per kernel column, the ``(F*Ho, C*H)`` band matrix of the correlation."""
    kh, kw, C, F = w.shape
    rows = np.arange(Ho)[:, None]
    cols = rows + np.arange(kh)[None, :]
    mats = []
    for c in range(kw):
        band = np.zeros((F, Ho, C, H))
        band[:, rows, :, cols] = w[:, c].transpose(0, 2, 1)[None]
        mats.append(band.reshape(F * Ho, C * H))
    return mats, rows, cols


def _use_banded(H, kh):
    # tall kernels waste little of the band and avoid a large im2col copy
    return 2 * kh >= H


def conv_forward(x, w, b):
    """``x``: (B, H, W, C); ``w``: (kh, kw, C, F); returns (B, Ho, Wo, F)."""
    B, H, W, C = x.shape
    kh, kw, _, F = w.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    if _use_banded(H, kh):
        mats, _, _ = _banded(w, H, Ho)
        acc = np.zeros((F * Ho, B * Wo))
        for c in range(kw):
            cols = x[:, :, c:c + Wo, :].transpose(3, 1, 0, 2).reshape(C * H, B * Wo)
            acc += mats[c] @ cols
        out = acc.reshape(F, Ho, B, Wo).transpose(2, 1, 3, 0)
        return np.ascontiguousarray(out) + b
    out = np.empty((B, Ho, Wo, F))
    # kernel column c laid out as (C*kh, F) to match the patch rows
    wcols = [w[:, c].transpose(1, 0, 2).reshape(C * kh, F) for c in range(kw)]
    for sl in _chunks(B, Ho * Wo * C * kh * 8):
        xb = x[sl]
        acc = np.zeros((xb.shape[0] * Ho * Wo, F))
        for c in range(kw):
            acc += _column_patches(xb, kh, c, Wo) @ wcols[c]
        out[sl] = acc.reshape(xb.shape[0], Ho, Wo, F)
    out += b
    return out


def conv_backward(x, w, g, need_input=True, need_params=True):
    """Gradients of a valid convolution given the output gradient ``g``.

    Returns ``(dx, dw, db)``; skipped gradients come back as ``None``.
    """
    B, H, W, C = x.shape
    kh, kw, _, F = w.shape
    Ho, Wo = g.shape[1:3]
    dw = np.zeros_like(w) if need_params else None
    db = g.sum(axis=(0, 1, 2)) if need_params else None
    dx = np.zeros_like(x) if need_input else None
    if not (need_input or need_params):
        return dx, dw, db
    if _use_banded(H, kh):
        mats, rows, cols = _banded(w, H, Ho)
        gm = g.transpose(3, 1, 0, 2).reshape(F * Ho, B * Wo)
        for c in range(kw):
            if need_params:
                xc = x[:, :, c:c + Wo, :].transpose(3, 1, 0, 2).reshape(C * H, B * Wo)
                dband = (gm @ xc.T).reshape(F, Ho, C, H)
                # dw[a, c, ch, f] sums the band entries (f, i, ch, i + a) over i
                dw[:, c] = dband[:, rows, :, cols].sum(axis=0).transpose(0, 2, 1)
            if need_input:
                dcols = (mats[c].T @ gm).reshape(C, H, B, Wo)
                dx[:, :, c:c + Wo, :] += dcols.transpose(2, 1, 3, 0)
        return dx, dw, db
    for sl in _chunks(B, Ho * Wo * C * kh * 8):
        xb = x[sl]
        gb = g[sl].reshape(-1, F)
        nb = xb.shape[0]
        for c in range(kw):
            if need_params:
                patches = _column_patches(xb, kh, c, Wo)
                dw[:, c] += (patches.T @ gb).reshape(C, kh, F).transpose(1, 0, 2)
            if need_input:
                # rows ordered (kh, C) so each kernel row is a contiguous block
                wc = w[:, c].reshape(kh * C, F)
                gp = (gb @ wc.T).reshape(nb, Ho, Wo, kh, C)
                gp = np.ascontiguousarray(np.moveaxis(gp, 3, 0))
                dxb = dx[sl]
                for a in range(kh):
                    dxb[:, a:a + Ho, c:c + Wo, :] += gp[a]
    return dx, dw, db


def pool_output_shape(in_shape, ph, pw, sh, sw):
    H, W = in_shape[:2]
    return (H - ph) // sh + 1, (W - pw) // sw + 1


def maxpool_forward(x, ph, pw, sh, sw):
    """Max pooling; returns the output and the flat input index of each winner.

    Ties go to the first maximum of the window in row-major order.
    """
    B, H, W, C = x.shape
    Ho, Wo = pool_output_shape((H, W), ph, pw, sh, sw)
    win = sliding_window_view(x, (ph, pw), axis=(1, 2))[:, ::sh, ::sw][:, :Ho, :Wo]
    flat = win.reshape(B, Ho, Wo, C, ph * pw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    a, c = np.divmod(arg, pw)
    rows = np.arange(Ho)[None, :, None, None] * sh + a
    cols = np.arange(Wo)[None, None, :, None] * sw + c
    bidx = np.arange(B)[:, None, None, None]
    chan = np.arange(C)[None, None, None, :]
    index = ((bidx * H + rows) * W + cols) * C + chan
    return out, index


def maxpool_backward(x_shape, index, g):
    """Route each output gradient to its winning input, summing overlaps."""
    size = int(np.prod(x_shape))
    dx = np.bincount(index.ravel(), weights=g.ravel(), minlength=size)
    return dx.reshape(x_shape)


def dense_forward(x, w, b):
    return x @ w + b


def dense_backward(x, w, g, need_input=True, need_params=True):
    dw = x.T @ g if need_params else None
    db = g.sum(axis=0) if need_params else None
    dx = g @ w.T if need_input else None
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))
