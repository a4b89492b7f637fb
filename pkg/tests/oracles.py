"""Independent brute-force reference implementations.

Everything here is written as plain nested loops over definitions, never
touching the library's vectorized kernels, so oracle and implementation can
only agree by computing the same mathematics.
"""

import numpy as np


def conv2d_direct(x, w, bias=None, groups=1, stride=1, padding=0):
    """Direct 6-loop grouped cross-correlation."""
    n_batch, c_in, h, width = x.shape
    c_out, cg_in, k, _ = w.shape
    cg_out = c_out // groups
    ho = (h + 2 * padding - k) // stride + 1
    wo = (width + 2 * padding - k) // stride + 1
    xp = np.zeros((n_batch, c_in, h + 2 * padding, width + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + width] = x
    out = np.zeros((n_batch, c_out, ho, wo), dtype=np.float64)
    for n in range(n_batch):
        for co in range(c_out):
            grp = co // cg_out
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg_in):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (w[co, ci, ky, kx]
                                        * xp[n, grp * cg_in + ci,
                                             i * stride + ky, j * stride + kx])
                    out[n, co, i, j] = acc
            if bias is not None:
                out[n, co] += bias[co]
    return out


def conv1d_direct(d, kernel):
    """Per-position dot product with zero padding, one shared kernel."""
    n_batch, c = d.shape
    alpha = kernel.shape[0]
    half = (alpha - 1) // 2
    out = np.zeros((n_batch, c), dtype=np.float64)
    for n in range(n_batch):
        for pos in range(c):
            acc = 0.0
            for i in range(alpha):
                src = pos - half + i
                if 0 <= src < c:
                    acc += kernel[i] * d[n, src]
            out[n, pos] = acc
    return out


def gap_direct(x):
    """Double-loop spatial mean."""
    n_batch, c, h, w = x.shape
    out = np.zeros((n_batch, c), dtype=np.float64)
    for n in range(n_batch):
        for ch in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[n, ch, i, j]
            out[n, ch] = acc / (h * w)
    return out


def scale_direct(x, w):
    """Loop-computed per-element channel gating."""
    n_batch, c, h, width = x.shape
    out = np.zeros_like(x)
    for n in range(n_batch):
        for ch in range(c):
            wn = 0 if w.shape[0] == 1 else n
            for i in range(h):
                for j in range(width):
                    out[n, ch, i, j] = x[n, ch, i, j] * w[wn, ch, 0, 0]
    return out
