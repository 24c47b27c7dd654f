"""Numba-jitted implementations of the hot kernels (default backend).

Loops are written scalar-style; nopython compilation with on-disk caching.
No fastmath, so results are reproducible run to run on a given machine.
"""

import numpy as np
from numba import njit

BACKEND = "numba"


@njit(cache=True)
def _im2col(x, kh, kw, stride, pad, col):
    B, H, W, Cin = x.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    for n in range(B):
        for oy in range(OH):
            iy0 = oy * stride - pad
            for ox in range(OW):
                ix0 = ox * stride - pad
                row = ((n * OH + oy) * OW + ox)
                j = 0
                for ky in range(kh):
                    iy = iy0 + ky
                    for kx in range(kw):
                        ix = ix0 + kx
                        if iy < 0 or iy >= H or ix < 0 or ix >= W:
                            for ci in range(Cin):
                                col[row, j] = 0.0
                                j += 1
                        else:
                            for ci in range(Cin):
                                col[row, j] = x[n, iy, ix, ci]
                                j += 1
    return col


def im2col(x, kh, kw, stride, pad):
    B, H, W, Cin = x.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    col = np.empty((B * OH * OW, kh * kw * Cin), dtype=x.dtype)
    return _im2col(x, kh, kw, stride, pad, col)


@njit(cache=True)
def _col2im(cols, B, H, W, Cin, kh, kw, stride, pad, out):
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    for n in range(B):
        for oy in range(OH):
            iy0 = oy * stride - pad
            for ox in range(OW):
                ix0 = ox * stride - pad
                row = ((n * OH + oy) * OW + ox)
                j = 0
                for ky in range(kh):
                    iy = iy0 + ky
                    for kx in range(kw):
                        ix = ix0 + kx
                        if iy < 0 or iy >= H or ix < 0 or ix >= W:
                            j += Cin
                        else:
                            for ci in range(Cin):
                                out[n, iy, ix, ci] += cols[row, j]
                                j += 1
    return out


def col2im(cols, B, H, W, Cin, kh, kw, stride, pad):
    out = np.zeros((B, H, W, Cin), dtype=cols.dtype)
    return _col2im(cols, B, H, W, Cin, kh, kw, stride, pad, out)


@njit(cache=True)
def composite_forward(canvas, patch, cx, cy, half_w, half_h, cos_t, sin_t,
                      contrast, brightness, noise, x0, y0):
    ph, pw = patch.shape[0], patch.shape[1]
    bh, bw = noise.shape[0], noise.shape[1]
    mask = np.zeros((bh, bw), dtype=np.uint8)
    su = pw / (2.0 * half_w)
    sv = ph / (2.0 * half_h)
    for r in range(bh):
        dy = y0 + r + 0.5 - cy
        for c in range(bw):
            dx = x0 + c + 0.5 - cx
            pu = (cos_t * dx + sin_t * dy) * su + pw / 2.0
            pv = (-sin_t * dx + cos_t * dy) * sv + ph / 2.0
            if pu < 0.0 or pu >= pw or pv < 0.0 or pv >= ph:
                continue
            mask[r, c] = 1
            fu = pu - 0.5
            if fu < 0.0:
                fu = 0.0
            elif fu > pw - 1.0:
                fu = pw - 1.0
            fv = pv - 0.5
            if fv < 0.0:
                fv = 0.0
            elif fv > ph - 1.0:
                fv = ph - 1.0
            iu0 = int(fu)
            if iu0 > pw - 2:
                iu0 = pw - 2
            iv0 = int(fv)
            if iv0 > ph - 2:
                iv0 = ph - 2
            wu = fu - iu0
            wv = fv - iv0
            for ch in range(3):
                val = ((1.0 - wv) * ((1.0 - wu) * patch[iv0, iu0, ch] + wu * patch[iv0, iu0 + 1, ch])
                       + wv * ((1.0 - wu) * patch[iv0 + 1, iu0, ch] + wu * patch[iv0 + 1, iu0 + 1, ch]))
                pre = val * contrast + brightness + noise[r, c, ch]
                if pre < 0.0:
                    pre = 0.0
                elif pre > 1.0:
                    pre = 1.0
                canvas[y0 + r, x0 + c, ch] = pre
    return mask


@njit(cache=True)
def composite_backward(grad_canvas, patch, cx, cy, half_w, half_h, cos_t, sin_t,
                       contrast, brightness, noise, x0, y0):
    ph, pw = patch.shape[0], patch.shape[1]
    bh, bw = noise.shape[0], noise.shape[1]
    grad_patch = np.zeros_like(patch)
    su = pw / (2.0 * half_w)
    sv = ph / (2.0 * half_h)
    for r in range(bh):
        dy = y0 + r + 0.5 - cy
        for c in range(bw):
            dx = x0 + c + 0.5 - cx
            pu = (cos_t * dx + sin_t * dy) * su + pw / 2.0
            pv = (-sin_t * dx + cos_t * dy) * sv + ph / 2.0
            if pu < 0.0 or pu >= pw or pv < 0.0 or pv >= ph:
                continue
            fu = pu - 0.5
            if fu < 0.0:
                fu = 0.0
            elif fu > pw - 1.0:
                fu = pw - 1.0
            fv = pv - 0.5
            if fv < 0.0:
                fv = 0.0
            elif fv > ph - 1.0:
                fv = ph - 1.0
            iu0 = int(fu)
            if iu0 > pw - 2:
                iu0 = pw - 2
            iv0 = int(fv)
            if iv0 > ph - 2:
                iv0 = ph - 2
            wu = fu - iu0
            wv = fv - iv0
            for ch in range(3):
                val = ((1.0 - wv) * ((1.0 - wu) * patch[iv0, iu0, ch] + wu * patch[iv0, iu0 + 1, ch])
                       + wv * ((1.0 - wu) * patch[iv0 + 1, iu0, ch] + wu * patch[iv0 + 1, iu0 + 1, ch]))
                pre = val * contrast + brightness + noise[r, c, ch]
                if 0.0 <= pre <= 1.0:
                    g = grad_canvas[y0 + r, x0 + c, ch] * contrast
                    grad_patch[iv0, iu0, ch] += g * (1.0 - wv) * (1.0 - wu)
                    grad_patch[iv0, iu0 + 1, ch] += g * (1.0 - wv) * wu
                    grad_patch[iv0 + 1, iu0, ch] += g * wv * (1.0 - wu)
                    grad_patch[iv0 + 1, iu0 + 1, ch] += g * wv * wu
                grad_canvas[y0 + r, x0 + c, ch] = 0.0
    return grad_patch
