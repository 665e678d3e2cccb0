"""Motion-vector-guided deformable alignment.

The decoder's block motion field gives a free, coarse alignment of the
previous feature states onto the current frame. A small trunk looks at the
current features next to motion-warped copies of both states and predicts,
per offset group and kernel tap, a bounded refinement on top of the motion
vector plus a modulation mask. Each state stream then passes through its
own modulated deformable 3x3 convolution whose sampling positions are
motion vector plus refinement, applied to the *unwarped* state so the warp
error is not baked in.

The deformable conv is evaluated as: project the state through the 3x3
kernel taps first (a 1x1 conv with K^2-stacked output planes), then gather
each projected plane at its tap's offset positions. Sampling is linear in
the feature values, so this is exactly the textbook formulation that
samples raw features and contracts with the kernel afterwards; it is just
cheaper, because each output channel samples one projected plane instead
of every input channel.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .errors import require
from .model import ReconConfig
from .params import ParamSet
from .tensor import Tensor


@dataclasses.dataclass
class AlignmentFields:
    """Sampling geometry for one aligned step, shared by both streams.

    base_offset is the dense per-pixel motion field (N, 2, H, W), plain
    numpy with x first; no gradient flows into it. residual_offsets has
    2*K^2*G channels laid out (g*K^2 + t)*2 + {0: x, 1: y}; mask has K^2*G
    channels laid out g*K^2 + t with values in (0, 1) when predicted.
    """

    base_offset: np.ndarray
    residual_offsets: Tensor
    mask: Tensor


def warp(features: Tensor, dense_motion: np.ndarray) -> Tensor:
    """Backward-warp features by a per-pixel motion field.

    dense_motion is (N, 2, H, W), x-displacement first, in pixels: output
    pixel p reads the features at p + motion(p), border-clamped.
    """
    n, _, h, w = features.dims
    require(dense_motion.shape == (n, 2, h, w), "motion field does not fit features")
    coords = T.base_grid(n, h, w, features.dtype) + dense_motion.astype(
        features.dtype.type, copy=False
    )
    return T.bilinear_sample(features, T.constant(coords))


def _tap_stack(weight: Tensor) -> Tensor:
    """Reorder a (C_out, C_in, K, K) kernel into (K^2*C_out, C_in, 1, 1).

    Row t*C_out + c of the result is tap t of output channel c, so a 1x1
    conv with this kernel yields the K^2 projected planes deform_gather
    expects.
    """
    c_out, c_in, k, _ = weight.dims
    return T.reshape(T.permute(weight, (2, 3, 0, 1)), (k * k * c_out, c_in, 1, 1))


def predict_offsets_mask(
    params: ParamSet,
    cfg: ReconConfig,
    current: Tensor,
    warped_low: Tensor,
    warped_high: Tensor,
    dense_motion: np.ndarray,
) -> AlignmentFields:
    """Bounded tap offsets and modulation mask from aligned evidence.

    The offsets are bounded to +-offset_limit through a scaled tanh; the
    mask comes from a sigmoid. Both heads share a two-conv trunk over the
    concatenation of current features and the two warped states.
    """
    feat = T.concat([current, warped_low, warped_high])
    feat = T.leaky_relu(
        T.conv2d(feat, params["mvgda.trunk.conv1.weight"], params["mvgda.trunk.conv1.bias"], padding=1),
        0.1,
    )
    feat = T.leaky_relu(
        T.conv2d(feat, params["mvgda.trunk.conv2.weight"], params["mvgda.trunk.conv2.bias"], padding=1),
        0.1,
    )
    raw = T.conv2d(
        feat, params["mvgda.head_o.weight"], params["mvgda.head_o.bias"], padding=1
    )
    delta = T.mul_scalar(T.tanh(raw), cfg.offset_limit)
    mask = T.sigmoid(
        T.conv2d(feat, params["mvgda.head_m.weight"], params["mvgda.head_m.bias"], padding=1)
    )
    return AlignmentFields(
        base_offset=dense_motion, residual_offsets=delta, mask=mask
    )


def modulated_deform_conv(
    features: Tensor,
    fields: AlignmentFields,
    weight: Tensor,
    bias: Tensor | None,
    groups: int,
) -> Tensor:
    """Modulated deformable 3x3 conv sampling at motion plus refinement.

    Each kernel tap of output channel c samples the projection of
    `features` through `weight` at position p + base_offset(p) + tap
    displacement + residual_offsets[g(c), tap](p), scaled by the matching
    mask value, with border-clamped bilinear lookups.
    """
    n, _, h, w = features.dims
    require(
        fields.base_offset.shape == (n, 2, h, w),
        "base offset field does not fit features",
    )
    taps = T.conv2d(features, _tap_stack(weight))
    base = np.ascontiguousarray(
        T.base_grid(n, h, w, features.dtype)
        + fields.base_offset.astype(features.dtype.type, copy=False)
    )
    gathered = T.deform_gather(
        taps, fields.residual_offsets, fields.mask, base, groups=groups
    )
    return gathered if bias is None else T.add_bias(gathered, bias)


def align_dual(
    params: ParamSet,
    cfg: ReconConfig,
    state_low: Tensor,
    state_high: Tensor,
    current: Tensor,
    dense_motion: np.ndarray,
    fields: AlignmentFields | None = None,
) -> tuple[Tensor, Tensor]:
    """Align both recurrent streams onto the current frame.

    Warps both states by the motion field, predicts one shared set of
    offset/mask fields from the warped evidence, then runs each unwarped
    state through its own deformable conv. Passing `fields` skips the
    prediction and uses the given geometry for both streams.

    The onlymv variant stops at the motion warp. The onlydcn variant runs
    with the motion field forced to zero (the caller passes zeros), and
    onlygl runs the full path with a flow field in place of the codec
    motion; neither changes the graph shape here.
    """
    if cfg.variant == "onlymv":
        return warp(state_low, dense_motion), warp(state_high, dense_motion)
    if fields is None:
        warped_low = warp(state_low, dense_motion)
        warped_high = warp(state_high, dense_motion)
        fields = predict_offsets_mask(
            params, cfg, current, warped_low, warped_high, dense_motion
        )
    aligned_low = modulated_deform_conv(
        state_low,
        fields,
        params["mvgda.dcn_l.weight"],
        params["mvgda.dcn_l.bias"],
        cfg.groups,
    )
    aligned_high = modulated_deform_conv(
        state_high,
        fields,
        params["mvgda.dcn_h.weight"],
        params["mvgda.dcn_h.bias"],
        cfg.groups,
    )
    return aligned_low, aligned_high
