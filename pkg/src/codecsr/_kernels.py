"""Gather/scatter cores used by the sampling ops.

Bilinear sampling forward is a gather; its adjoint is a weighted splat of
each value onto the four surrounding grid cells. The splat is the one spot
where pure numpy has no fast deterministic primitive (np.add.at is slow,
bincount allocates large index vectors), so a numba kernel is used when
numba is importable and a bincount fallback otherwise. Both are sequential
and therefore bit-deterministic for a fixed input.

The deformable gather additionally has fused forward/backward kernels that
walk taps and pixels in one pass instead of materialising (C, K^2, P)
corner-index temporaries; the pure-numpy equivalent lives in tensor.py and
is used when numba is missing.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


@njit(cache=True)
def _splat_shared_jit(vals, y0, x0, wy, wx, out, width):
    # vals (C, P), corner indices/weights (P,), out (C, H*W) updated in place.
    channels = vals.shape[0]
    for p in range(vals.shape[1]):
        j00 = y0[p] * width + x0[p]
        j01 = y0[p] * width + x0[p] + 1 if x0[p] + 1 < width else j00
        stride_y = width if (y0[p] + 1) * width < out.shape[1] else 0
        w00 = (1.0 - wy[p]) * (1.0 - wx[p])
        w01 = (1.0 - wy[p]) * wx[p]
        w10 = wy[p] * (1.0 - wx[p])
        w11 = wy[p] * wx[p]
        for c in range(channels):
            v = vals[c, p]
            out[c, j00] += v * w00
            out[c, j01] += v * w01
            out[c, j00 + stride_y] += v * w10
            out[c, j01 + stride_y] += v * w11


@njit(cache=True)
def _splat_grouped_jit(vals, rows, y0, x0, wy, wx, out, width):
    # vals (S, R, P): S index groups sharing positions, R rows per group.
    # rows (S, R) gives the output row for each value; out (rows_total, H*W).
    n_shared, n_rows, n_pos = vals.shape
    for s in range(n_shared):
        for p in range(n_pos):
            j00 = y0[s, p] * width + x0[s, p]
            j01 = j00 + 1 if x0[s, p] + 1 < width else j00
            stride_y = width if (y0[s, p] + 1) * width < out.shape[1] else 0
            w00 = (1.0 - wy[s, p]) * (1.0 - wx[s, p])
            w01 = (1.0 - wy[s, p]) * wx[s, p]
            w10 = wy[s, p] * (1.0 - wx[s, p])
            w11 = wy[s, p] * wx[s, p]
            for r in range(n_rows):
                v = vals[s, r, p]
                row = rows[s, r]
                out[row, j00] += v * w00
                out[row, j01] += v * w01
                out[row, j00 + stride_y] += v * w10
                out[row, j01 + stride_y] += v * w11


@njit(cache=True)
def _block_sad_jit(cy, ry, cand, y0s, y1s, x0s, x1s, best_sad, best_idx):
    # cy/ry (H, W) int32 luma; cand (M, 2) rows are (dx, dy) already in
    # tie-break order. Updates per-block best SAD (int64) and the winning
    # candidate index on strict improvement, so the earliest candidate in
    # the order wins ties. Candidates whose reference window leaves the
    # frame are skipped per block.
    h, w = cy.shape
    gh = y0s.size
    gw = x0s.size
    for ci in range(cand.shape[0]):
        dx = cand[ci, 0]
        dy = cand[ci, 1]
        for by in range(gh):
            y0 = y0s[by]
            y1 = y1s[by]
            if y0 + dy < 0 or y1 + dy > h:
                continue
            for bx in range(gw):
                x0 = x0s[bx]
                x1 = x1s[bx]
                if x0 + dx < 0 or x1 + dx > w:
                    continue
                s = 0
                for yy in range(y0, y1):
                    for xx in range(x0, x1):
                        d = cy[yy, xx] - ry[yy + dy, xx + dx]
                        s += d if d >= 0 else -d
                b = by * gw + bx
                if s < best_sad[b]:
                    best_sad[b] = s
                    best_idx[b] = ci


@njit(cache=True)
def _lrelu_fwd_jit(x, out, slope):
    # Flat views; out[i] = x[i] if positive else slope * x[i].
    for i in range(x.size):
        v = x[i]
        out[i] = v if v > 0.0 else v * slope


@njit(cache=True)
def _lrelu_bwd_jit(x, g, out, slope):
    for i in range(x.size):
        out[i] = g[i] if x[i] > 0.0 else g[i] * slope


@njit(cache=True)
def _im2col_jit(xp, cols, k, stride):
    # xp (N, C, Hp, Wp) padded input; cols (k*k, C, N, Ho, Wo) filled so that
    # row (t, c) of the flattened matrix is channel c shifted by tap t.
    kk, c, n, ho, wo = cols.shape
    for t in range(kk):
        ky = t // k
        kx = t % k
        for cc in range(c):
            for i in range(n):
                for y in range(ho):
                    ys = y * stride + ky
                    for x in range(wo):
                        cols[t, cc, i, y, x] = xp[i, cc, ys, x * stride + kx]


@njit(cache=True)
def _col2im_jit(gcols, gxp, k, stride):
    # Adjoint of _im2col_jit: scatter-add cols (k*k, C, N, Ho, Wo) back onto
    # the padded input gradient (N, C, Hp, Wp).
    kk, c, n, ho, wo = gcols.shape
    for t in range(kk):
        ky = t // k
        kx = t % k
        for cc in range(c):
            for i in range(n):
                for y in range(ho):
                    ys = y * stride + ky
                    for x in range(wo):
                        gxp[i, cc, ys, x * stride + kx] += gcols[t, cc, i, y, x]


@njit(cache=True)
def _deform_fwd_jit(taps, coords, mask, out, height, width):
    # taps (K2*C, H*W); coords (G, K2, 2, P) unclamped, x then y; mask
    # (G, K2, P); out (C, P) zero-initialised. Accumulates the masked
    # bilinear lookup of tap plane t*C + ch at coords[g(ch), t].
    g_count = coords.shape[0]
    ksq = coords.shape[1]
    n_pos = coords.shape[3]
    channels = out.shape[0]
    cg = channels // g_count
    for g in range(g_count):
        for t in range(ksq):
            for p in range(n_pos):
                xx = coords[g, t, 0, p]
                yy = coords[g, t, 1, p]
                if xx < 0.0:
                    xx = 0.0
                elif xx > width - 1.0:
                    xx = width - 1.0
                if yy < 0.0:
                    yy = 0.0
                elif yy > height - 1.0:
                    yy = height - 1.0
                x0 = int(xx)
                y0 = int(yy)
                fx = xx - x0
                fy = yy - y0
                x1 = x0 + 1 if x0 + 1 < width else width - 1
                y1 = y0 + 1 if y0 + 1 < height else height - 1
                j00 = y0 * width + x0
                j01 = y0 * width + x1
                j10 = y1 * width + x0
                j11 = y1 * width + x1
                m = mask[g, t, p]
                for cc in range(cg):
                    ch = g * cg + cc
                    row = t * channels + ch
                    v00 = taps[row, j00]
                    v01 = taps[row, j01]
                    v10 = taps[row, j10]
                    v11 = taps[row, j11]
                    top = v00 + fx * (v01 - v00)
                    bot = v10 + fx * (v11 - v10)
                    out[ch, p] += m * (top + fy * (bot - top))


@njit(cache=True)
def _deform_bwd_jit(
    taps,
    coords,
    mask,
    gout,
    g_taps,
    g_delta,
    g_mask,
    height,
    width,
    need_taps,
    need_delta,
    need_mask,
):
    # Fused adjoint of _deform_fwd_jit for one batch element: recomputes
    # the corner lookups once per (group, tap, pixel) and accumulates the
    # tap splat, the offset gradient (zeroed where the unclamped coordinate
    # left the grid) and the mask gradient in the same sweep. g_taps must
    # arrive zero-initialised; g_delta/g_mask are fully overwritten.
    g_count = coords.shape[0]
    ksq = coords.shape[1]
    n_pos = coords.shape[3]
    channels = gout.shape[0]
    cg = channels // g_count
    for g in range(g_count):
        for t in range(ksq):
            for p in range(n_pos):
                xraw = coords[g, t, 0, p]
                yraw = coords[g, t, 1, p]
                in_x = 1.0 if (xraw >= 0.0 and xraw <= width - 1.0) else 0.0
                in_y = 1.0 if (yraw >= 0.0 and yraw <= height - 1.0) else 0.0
                xx = xraw
                yy = yraw
                if xx < 0.0:
                    xx = 0.0
                elif xx > width - 1.0:
                    xx = width - 1.0
                if yy < 0.0:
                    yy = 0.0
                elif yy > height - 1.0:
                    yy = height - 1.0
                x0 = int(xx)
                y0 = int(yy)
                fx = xx - x0
                fy = yy - y0
                x1 = x0 + 1 if x0 + 1 < width else width - 1
                y1 = y0 + 1 if y0 + 1 < height else height - 1
                j00 = y0 * width + x0
                j01 = y0 * width + x1
                j10 = y1 * width + x0
                j11 = y1 * width + x1
                w00 = (1.0 - fy) * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w10 = fy * (1.0 - fx)
                w11 = fy * fx
                m = mask[g, t, p]
                acc_dx = 0.0
                acc_dy = 0.0
                acc_gm = 0.0
                for cc in range(cg):
                    ch = g * cg + cc
                    row = t * channels + ch
                    gh = gout[ch, p]
                    wg = gh * m
                    v00 = taps[row, j00]
                    v01 = taps[row, j01]
                    v10 = taps[row, j10]
                    v11 = taps[row, j11]
                    if need_mask:
                        top = v00 + fx * (v01 - v00)
                        bot = v10 + fx * (v11 - v10)
                        acc_gm += gh * (top + fy * (bot - top))
                    if need_taps:
                        g_taps[row, j00] += wg * w00
                        g_taps[row, j01] += wg * w01
                        g_taps[row, j10] += wg * w10
                        g_taps[row, j11] += wg * w11
                    if need_delta:
                        acc_dx += wg * (
                            (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
                        )
                        acc_dy += wg * (
                            (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
                        )
                if need_delta:
                    g_delta[g, t, 0, p] = acc_dx * in_x
                    g_delta[g, t, 1, p] = acc_dy * in_y
                if need_mask:
                    g_mask[g, t, p] = acc_gm


def _splat_shared_bincount(vals, y0, x0, wy, wx, out, width):
    channels, n_cells = out.shape
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, n_cells // width - 1)
    j = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1])
    w = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
    idx = (np.arange(channels)[:, None, None] * n_cells + j[None]).ravel()
    contrib = (vals[:, None, :] * w[None]).ravel()
    out += np.bincount(idx, weights=contrib, minlength=channels * n_cells).reshape(
        out.shape
    ).astype(out.dtype, copy=False)


def _splat_grouped_bincount(vals, rows, y0, x0, wy, wx, out, width):
    n_cells = out.shape[1]
    height = n_cells // width
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    j = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1])
    w = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
    # Broadcast to (4, S, R, P) flat indices into out.
    idx = (rows[None, :, :, None] * n_cells + j[:, :, None, :]).ravel()
    contrib = (w[:, :, None, :] * vals[None]).ravel()
    out += np.bincount(idx, weights=contrib, minlength=out.size).reshape(
        out.shape
    ).astype(out.dtype, copy=False)


def splat_shared(vals, y0, x0, wy, wx, out, width):
    """Accumulate vals (C, P) into out (C, H*W) at bilinear corner weights.

    All channels share the same target positions. Corner (y0, x0) is the
    top-left cell; the +1 neighbours are clamped to the grid edge, where
    their weights are zero by construction.
    """
    if _HAVE_NUMBA:
        _splat_shared_jit(vals, y0, x0, wy, wx, out, width)
    else:
        _splat_shared_bincount(vals, y0, x0, wy, wx, out, width)


def splat_grouped(vals, rows, y0, x0, wy, wx, out, width):
    """Accumulate vals (S, R, P) into out rows given by rows (S, R).

    Each of the S slices shares one position field across its R rows; used
    by the deformable-gather backward where a channel group shares offsets.
    """
    if _HAVE_NUMBA:
        _splat_grouped_jit(vals, rows, y0, x0, wy, wx, out, width)
    else:
        _splat_grouped_bincount(vals, rows, y0, x0, wy, wx, out, width)
