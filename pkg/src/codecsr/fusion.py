"""Residual-map-gated fusion.

The quantized residual magnitude marks where motion compensation failed:
exactly the places where the aligned history is least trustworthy and also
the places that carry fresh detail worth propagating. A tiny network turns
the residual plane into a single-channel gate in (0, 1); the gate scales
both aligned state streams before a 3x3 conv mixes them with the current
frame's features.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import ReconConfig
from .params import ParamSet
from .tensor import Tensor


def compute_gate(params: ParamSet, cfg: ReconConfig, residual: Tensor) -> Tensor:
    """Single-channel gate from the (N, 1, H, W) residual prior.

    The nogate variant returns ones, removing the gate's influence while
    keeping the rest of the graph identical.
    """
    if cfg.variant == "nogate":
        return T.constant(
            np.ones(
                (residual.dims[0], 1, residual.dims[2], residual.dims[3]),
                dtype=residual.dtype,
            )
        )
    feat = T.leaky_relu(
        T.conv2d(residual, params["rmgf.fres.conv1.weight"], params["rmgf.fres.conv1.bias"], padding=1),
        0.1,
    )
    raw = T.conv2d(
        feat, params["rmgf.fres.conv2.weight"], params["rmgf.fres.conv2.bias"], padding=1
    )
    return T.sigmoid(raw)


def fuse(
    params: ParamSet,
    cfg: ReconConfig,
    gate: Tensor,
    aligned_low: Tensor,
    aligned_high: Tensor,
    current: Tensor,
) -> Tensor:
    """Mix gated aligned states with current features into trunk input."""
    gated_low = T.mul(aligned_low, gate)
    gated_high = T.mul(aligned_high, gate)
    mixed = T.concat([gated_low, gated_high, current])
    return T.leaky_relu(
        T.conv2d(mixed, params["rmgf.fuse.weight"], params["rmgf.fuse.bias"], padding=1),
        0.1,
    )
