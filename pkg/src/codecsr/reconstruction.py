"""Frame-type-adaptive reconstruction.

Decoded I-frames carry fresh quantized detail worth a deep refinement;
decoded P-frames are motion-compensated copies whose fixes mostly arrive
through the aligned history, so a shallow trunk suffices and keeps the
per-frame cost low. Both trunks feed one shared upsampling head, and a
bilinear x4 upscale of the decoded frame is added as a global skip. The
trunk output doubles as the high-level recurrent state.
"""

from __future__ import annotations

from . import tensor as T
from .codec import FrameType
from .model import ReconConfig
from .params import ParamSet
from .tensor import Tensor


def residual_block(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    """x + conv(lrelu(conv(x))): no normalization, no final activation."""
    y = T.leaky_relu(
        T.conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], padding=1),
        0.1,
    )
    y = T.conv2d(
        y, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], padding=1
    )
    return T.add(x, y)


def run_trunk(params: ParamSet, prefix: str, depth: int, x: Tensor) -> Tensor:
    for i in range(depth):
        x = residual_block(params, f"{prefix}.rb{i}", x)
    return x


def upsample_head(params: ParamSet, cfg: ReconConfig, x: Tensor) -> Tensor:
    """Two conv + pixel-shuffle x2 stages, then a 3-channel projection.

    Channel widths taper (C -> C/2 -> C/4) so the head's cost stays small
    next to the trunks even at 4x resolution.
    """
    y = T.conv2d(x, params["ftar.head.conv1.weight"], params["ftar.head.conv1.bias"], padding=1)
    y = T.leaky_relu(T.pixel_shuffle(y, 2), 0.1)
    y = T.conv2d(y, params["ftar.head.conv2.weight"], params["ftar.head.conv2.bias"], padding=1)
    y = T.leaky_relu(T.pixel_shuffle(y, 2), 0.1)
    return T.conv2d(y, params["ftar.head.conv3.weight"], params["ftar.head.conv3.bias"], padding=1)


def reconstruct(
    params: ParamSet,
    cfg: ReconConfig,
    fused: Tensor,
    frame_type: FrameType,
    decoded_lr: Tensor,
) -> tuple[Tensor, Tensor]:
    """Trunk by frame type, shared head, global bilinear skip.

    Returns (sr, trunk_output); the trunk output becomes the next step's
    high-level state.
    """
    if frame_type is FrameType.I:
        body = run_trunk(params, "ftar.trunk_i", cfg.m_blocks, fused)
    else:
        body = run_trunk(params, "ftar.trunk_p", cfg.n_blocks, fused)
    sr = T.add(upsample_head(params, cfg, body), T.upsample_bilinear(decoded_lr, cfg.scale))
    return sr, body
