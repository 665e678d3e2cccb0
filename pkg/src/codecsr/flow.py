"""Pyramidal intensity flow, used by the onlygl ablation.

A plain 3-level coarse-to-fine Lucas-Kanade estimator on luma: at each
level the current frame is warped by the upsampled flow, a windowed 2x2
normal system is solved per pixel, and the increment is added. It stands
in for the codec motion field to measure what the priors buy over a
general-purpose aligner of similar coarseness; it is deliberately modest,
not a state-of-the-art flow.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import require


def _downsample(plane: np.ndarray) -> np.ndarray:
    blurred = ndimage.gaussian_filter(plane, sigma=1.0, mode="nearest")
    return np.ascontiguousarray(blurred[::2, ::2])


def _warp_plane(plane: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")
    coords = np.stack([ys + flow[1], xs + flow[0]])
    return ndimage.map_coordinates(plane, coords, order=1, mode="nearest").astype(
        np.float32
    )


def _lk_refine(ref: np.ndarray, cur: np.ndarray, flow: np.ndarray, window: int) -> np.ndarray:
    """One Lucas-Kanade increment on top of the given flow."""
    warped = _warp_plane(cur, flow)
    gy, gx = np.gradient(warped.astype(np.float64))
    gt = (warped - ref).astype(np.float64)

    def box(a):
        return ndimage.uniform_filter(a, size=window, mode="nearest")

    sxx = box(gx * gx)
    syy = box(gy * gy)
    sxy = box(gx * gy)
    sxt = box(gx * gt)
    syt = box(gy * gt)
    det = sxx * syy - sxy * sxy
    eps = 1e-6
    usable = det > eps
    inv_det = np.where(usable, 1.0 / np.where(usable, det, 1.0), 0.0)
    du = (-syy * sxt + sxy * syt) * inv_det
    dv = (sxy * sxt - sxx * syt) * inv_det
    out = flow.copy()
    out[0] += du.astype(np.float32)
    out[1] += dv.astype(np.float32)
    return out


def estimate_flow(
    ref_luma: np.ndarray,
    cur_luma: np.ndarray,
    levels: int = 3,
    iterations: int = 3,
    window: int = 7,
) -> np.ndarray:
    """Dense flow (2, H, W), x first, such that ref(p + flow(p)) ~ cur(p).

    The convention matches the codec motion field: a current-frame
    position maps to where its content sits in the reference frame.
    """
    require(ref_luma.shape == cur_luma.shape, "luma planes must match")
    require(levels >= 1, "need at least one pyramid level")
    ref_pyr = [ref_luma.astype(np.float32)]
    cur_pyr = [cur_luma.astype(np.float32)]
    for _ in range(levels - 1):
        if min(ref_pyr[-1].shape) < 8:
            break
        ref_pyr.append(_downsample(ref_pyr[-1]))
        cur_pyr.append(_downsample(cur_pyr[-1]))
    flow = np.zeros((2, *ref_pyr[-1].shape), dtype=np.float32)
    for level in range(len(ref_pyr) - 1, -1, -1):
        if level != len(ref_pyr) - 1:
            h, w = ref_pyr[level].shape
            flow = (
                np.stack(
                    [
                        ndimage.zoom(flow[0], (h / flow.shape[1], w / flow.shape[2]), order=1),
                        ndimage.zoom(flow[1], (h / flow.shape[1], w / flow.shape[2]), order=1),
                    ]
                ).astype(np.float32)
                * 2.0
            )
        for _ in range(iterations):
            flow = _lk_refine(cur_pyr[level], ref_pyr[level], flow, window)
    return flow
