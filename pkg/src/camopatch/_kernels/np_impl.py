"""Pure-numpy reference implementations of the hot kernels.

Selected when ``CAMOPATCH_KERNELS=numpy`` or when numba is unavailable.
Same call signatures as the numba backend in ``nb_impl``.
"""

import numpy as np

BACKEND = "numpy"


def im2col(x, kh, kw, stride, pad):
    """Unfold conv windows of an NHWC batch into a (B*OH*OW, kh*kw*Cin) matrix."""
    B, H, W, Cin = x.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    s = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, OH, OW, kh, kw, Cin),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
    )
    return windows.reshape(B * OH * OW, kh * kw * Cin)


def col2im(cols, B, H, W, Cin, kh, kw, stride, pad):
    """Fold a column-gradient matrix back onto the NHWC input grid (adjoint of im2col)."""
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    cols = cols.reshape(B, OH, OW, kh, kw, Cin)
    xp = np.zeros((B, H + 2 * pad, W + 2 * pad, Cin), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            xp[:, ky : ky + OH * stride : stride, kx : kx + OW * stride : stride, :] += cols[:, :, :, ky, kx, :]
    if pad > 0:
        xp = xp[:, pad : pad + H, pad : pad + W, :]
    return xp


def composite_forward(canvas, patch, cx, cy, half_w, half_h, cos_t, sin_t,
                      contrast, brightness, noise, x0, y0):
    """Warp ``patch`` into ``canvas`` (in place) over the bbox anchored at (x0, y0).

    ``noise`` spans the clipped bbox; returns the uint8 footprint mask of the
    same region.  Inverse bilinear mapping, pivot at the placement center.
    """
    ph, pw = patch.shape[0], patch.shape[1]
    bh, bw = noise.shape[0], noise.shape[1]
    mask = np.zeros((bh, bw), dtype=np.uint8)
    if bh == 0 or bw == 0:
        return mask
    ys = y0 + np.arange(bh)[:, None] + 0.5 - cy
    xs = x0 + np.arange(bw)[None, :] + 0.5 - cx
    # rotate by -theta, then scale into patch pixel units
    u = cos_t * xs + sin_t * ys
    v = -sin_t * xs + cos_t * ys
    pu = u * (pw / (2.0 * half_w)) + pw / 2.0
    pv = v * (ph / (2.0 * half_h)) + ph / 2.0
    inside = (pu >= 0.0) & (pu < pw) & (pv >= 0.0) & (pv < ph)
    if not inside.any():
        return mask
    mask[inside] = 1
    fu = np.clip(pu[inside] - 0.5, 0.0, pw - 1.0)
    fv = np.clip(pv[inside] - 0.5, 0.0, ph - 1.0)
    iu0 = np.minimum(fu.astype(np.int64), pw - 2) if pw > 1 else np.zeros(fu.shape, np.int64)
    iv0 = np.minimum(fv.astype(np.int64), ph - 2) if ph > 1 else np.zeros(fv.shape, np.int64)
    wu = fu - iu0
    wv = fv - iv0
    p00 = patch[iv0, iu0]
    p01 = patch[iv0, iu0 + (1 if pw > 1 else 0)]
    p10 = patch[iv0 + (1 if ph > 1 else 0), iu0]
    p11 = patch[iv0 + (1 if ph > 1 else 0), iu0 + (1 if pw > 1 else 0)]
    val = ((1 - wv) * ((1 - wu) * p00.T + wu * p01.T) + wv * ((1 - wu) * p10.T + wu * p11.T)).T
    jittered = val * contrast + brightness + noise[inside]
    canvas[y0 : y0 + bh, x0 : x0 + bw][inside] = np.clip(jittered, 0.0, 1.0)
    return mask


def composite_backward(grad_canvas, patch, cx, cy, half_w, half_h, cos_t, sin_t,
                       contrast, brightness, noise, x0, y0):
    """Adjoint of ``composite_forward``.

    Accumulates the canvas gradient into a fresh patch gradient and zeroes the
    footprint region of ``grad_canvas`` in place (the patch overwrites the
    canvas there, so no gradient flows to the underlying image).
    """
    ph, pw = patch.shape[0], patch.shape[1]
    bh, bw = noise.shape[0], noise.shape[1]
    grad_patch = np.zeros_like(patch)
    if bh == 0 or bw == 0:
        return grad_patch
    ys = y0 + np.arange(bh)[:, None] + 0.5 - cy
    xs = x0 + np.arange(bw)[None, :] + 0.5 - cx
    u = cos_t * xs + sin_t * ys
    v = -sin_t * xs + cos_t * ys
    pu = u * (pw / (2.0 * half_w)) + pw / 2.0
    pv = v * (ph / (2.0 * half_h)) + ph / 2.0
    inside = (pu >= 0.0) & (pu < pw) & (pv >= 0.0) & (pv < ph)
    if not inside.any():
        return grad_patch
    fu = np.clip(pu[inside] - 0.5, 0.0, pw - 1.0)
    fv = np.clip(pv[inside] - 0.5, 0.0, ph - 1.0)
    iu0 = np.minimum(fu.astype(np.int64), pw - 2) if pw > 1 else np.zeros(fu.shape, np.int64)
    iv0 = np.minimum(fv.astype(np.int64), ph - 2) if ph > 1 else np.zeros(fv.shape, np.int64)
    iu1 = iu0 + (1 if pw > 1 else 0)
    iv1 = iv0 + (1 if ph > 1 else 0)
    wu = fu - iu0
    wv = fv - iv0
    p00 = patch[iv0, iu0]
    p01 = patch[iv0, iu1]
    p10 = patch[iv1, iu0]
    p11 = patch[iv1, iu1]
    val = ((1 - wv) * ((1 - wu) * p00.T + wu * p01.T) + wv * ((1 - wu) * p10.T + wu * p11.T)).T
    pre = val * contrast + brightness + noise[inside]
    live = ((pre >= 0.0) & (pre <= 1.0)).astype(patch.dtype)
    g = grad_canvas[y0 : y0 + bh, x0 : x0 + bw][inside] * live * contrast
    np.add.at(grad_patch, (iv0, iu0), (g.T * ((1 - wv) * (1 - wu))).T)
    np.add.at(grad_patch, (iv0, iu1), (g.T * ((1 - wv) * wu)).T)
    np.add.at(grad_patch, (iv1, iu0), (g.T * (wv * (1 - wu))).T)
    np.add.at(grad_patch, (iv1, iu1), (g.T * (wv * wu)).T)
    region = grad_canvas[y0 : y0 + bh, x0 : x0 + bw]
    region[inside] = 0.0
    return grad_patch
