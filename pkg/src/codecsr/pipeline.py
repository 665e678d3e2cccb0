"""Causal enhancement pipeline.

One step consumes the decoded low-resolution frame, its priors, and the
recurrent state, and emits the upscaled frame plus the next state. The
state carries two streams: the previous frame's extracted features
(low-level) and its trunk output (high-level). Only past and current
information ever enters a step, so the stream is causal by construction.

The two frame types take different routes. An I-frame carries no motion or
residual priors, so its freshly extracted features go straight into the
deeper trunk; alignment and fusion are skipped entirely. A P-frame warps
the state along the block motion, refines it with the deformable conv,
gates the result by the residual map, fuses, and finishes in the shallower
trunk. The first frame of a stream must be an I-frame and starts from a
zero state.

Steps are batch-agnostic: training rolls several clips through one step
with N > 1, provided every batch element shares the frame-type pattern.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import flow as flow_mod
from . import tensor as T
from .alignment import align_dual
from .codec import Frame, FrameType, PriorRecord, PriorStream, luma
from .errors import require
from .fusion import compute_gate, fuse
from .model import ReconConfig
from .params import ParamSet
from .reconstruction import reconstruct, run_trunk
from .tensor import Tensor


@dataclasses.dataclass
class FeatureState:
    low: Tensor  # previous frame's extracted features
    high: Tensor  # previous frame's trunk output


@dataclasses.dataclass
class StepPriors:
    """Batched per-frame priors in tensor-friendly form."""

    frame_type: FrameType
    dense_motion: np.ndarray  # (N, 2, H, W) float, x first
    residual: np.ndarray  # (N, 1, H, W) float

    @staticmethod
    def from_record(
        record: PriorRecord, height: int, width: int, dtype=np.float32
    ) -> "StepPriors":
        if record.frame_type is FrameType.I:
            return StepPriors(
                frame_type=FrameType.I,
                dense_motion=np.zeros((1, 2, height, width), dtype=dtype),
                residual=np.zeros((1, 1, height, width), dtype=dtype),
            )
        require(
            record.motion is not None and record.residual is not None,
            "P-frame priors need motion and residual",
        )
        return StepPriors(
            frame_type=FrameType.P,
            dense_motion=record.motion.dense(height, width, dtype)[None],
            residual=record.residual.plane(dtype)[None, None],
        )

    @staticmethod
    def stack(parts: list["StepPriors"]) -> "StepPriors":
        first = parts[0].frame_type
        require(
            all(p.frame_type is first for p in parts),
            "batched steps need one frame type across the batch",
        )
        return StepPriors(
            frame_type=first,
            dense_motion=np.concatenate([p.dense_motion for p in parts]),
            residual=np.concatenate([p.residual for p in parts]),
        )


def frame_to_tensor(frame: Frame, dtype=None) -> Tensor:
    dt = np.dtype(dtype) if dtype is not None else T.default_dtype()
    return T.constant(
        np.ascontiguousarray(frame.data.transpose(2, 0, 1)[None].astype(dt))
    )


def tensor_to_frames(t: Tensor) -> list[Frame]:
    arr = np.clip(t.numpy(), 0.0, 1.0).astype(np.float32)
    return [Frame(np.ascontiguousarray(arr[i].transpose(1, 2, 0))) for i in range(arr.shape[0])]


def extract_features(params: ParamSet, cfg: ReconConfig, lr: Tensor) -> Tensor:
    x = T.conv2d(lr, params["extract.stem.weight"], params["extract.stem.bias"], padding=1)
    return run_trunk(params, "extract", cfg.extract_blocks, x)


def zero_state(cfg: ReconConfig, n: int, h: int, w: int, dtype=None) -> FeatureState:
    dt = np.dtype(dtype) if dtype is not None else T.default_dtype()
    return FeatureState(
        low=T.zeros((n, cfg.channels, h, w), dtype=dt),
        high=T.zeros((n, cfg.channels, h, w), dtype=dt),
    )


def step(
    params: ParamSet,
    cfg: ReconConfig,
    lr: Tensor,
    priors: StepPriors,
    state: FeatureState | None,
) -> tuple[Tensor, FeatureState]:
    """Enhance one frame and advance the recurrent state.

    I-frames reconstruct directly from the extracted features through the
    deeper trunk and never touch the state; P-frames run the full
    align-gate-fuse path into the shallower trunk. Both leave the state as
    (extracted features, trunk output) for the next step.
    """
    n, c, h, w = lr.dims
    require(c == 3, "decoded frames have 3 channels")
    if state is None:
        require(
            priors.frame_type is FrameType.I,
            "a stream must start with an I-frame",
        )
    current = extract_features(params, cfg, lr)

    if priors.frame_type is FrameType.I:
        sr, body = reconstruct(params, cfg, current, FrameType.I, lr)
        return sr, FeatureState(low=current, high=body)

    require(state is not None, "P-frame steps need a prior state")
    require(
        state.low.dims == (n, cfg.channels, h, w),
        f"state dims {state.low.dims} do not match input {lr.dims}",
    )
    require(priors.dense_motion.shape == (n, 2, h, w), "bad motion prior shape")
    require(priors.residual.shape == (n, 1, h, w), "bad residual prior shape")
    motion = (
        np.zeros_like(priors.dense_motion)
        if cfg.variant == "onlydcn"
        else priors.dense_motion
    )
    aligned_low, aligned_high = align_dual(
        params, cfg, state.low, state.high, current, motion
    )
    gate = compute_gate(
        params, cfg, T.constant(priors.residual.astype(lr.dtype.type, copy=False))
    )
    fused = fuse(params, cfg, gate, aligned_low, aligned_high, current)
    sr, body = reconstruct(params, cfg, fused, FrameType.P, lr)
    return sr, FeatureState(low=current, high=body)


class StreamSession:
    """Stateful frame-by-frame interface over `step`.

    For the onlygl variant the session computes an intensity flow between
    the previous and current decoded frames and substitutes it for the
    codec motion field; everything else is unchanged.
    """

    def __init__(self, params: ParamSet, cfg: ReconConfig, dtype=None):
        self.params = params
        self.cfg = cfg
        self.dtype = np.dtype(dtype) if dtype is not None else T.default_dtype()
        self.state: FeatureState | None = None
        self._prev_frame: Frame | None = None

    def reset(self) -> None:
        self.state = None
        self._prev_frame = None

    def process(self, frame: Frame, record: PriorRecord) -> Frame:
        priors = StepPriors.from_record(record, frame.height, frame.width, self.dtype)
        if (
            self.cfg.variant == "onlygl"
            and record.frame_type is FrameType.P
            and self._prev_frame is not None
        ):
            flow = flow_mod.estimate_flow(luma(self._prev_frame), luma(frame))
            priors = dataclasses.replace(
                priors, dense_motion=flow[None].astype(self.dtype)
            )
        sr, self.state = step(
            self.params,
            self.cfg,
            frame_to_tensor(frame, self.dtype),
            priors,
            self.state,
        )
        self._prev_frame = frame
        return tensor_to_frames(sr)[0]


def run_stream(
    params: ParamSet,
    cfg: ReconConfig,
    frames: list[Frame],
    stream: PriorStream,
    dtype=None,
) -> list[Frame]:
    """Enhance a decoded stream end to end."""
    require(len(frames) == len(stream.frames), "frame count does not match priors")
    require(len(frames) >= 1, "empty stream")
    for f in frames:
        require(
            (f.height, f.width) == (stream.height, stream.width),
            "frame size does not match the stream header",
        )
    session = StreamSession(params, cfg, dtype)
    return [session.process(f, r) for f, r in zip(frames, stream.frames)]
