"""Budget accounting and runtime measurement.

Two independent views of compute cost: an analytic multiply-accumulate
count assembled from the layer dimensions, and an instrumented count taken
by metering an actual forward pass. The two must agree exactly, which
pins the analytic formulas to the code rather than to intent.

Conventions: one MAC per multiply; a bilinear lookup costs 8 MACs per
sampled value (4 corner weights, 2 lerps rolled into multiply-adds);
elementwise activations, gating products, and additions are not counted.
Latency is wall-clock per frame on the local machine, medians only;
absolute numbers are platform-relative and only ordering is meaningful.
"""

from __future__ import annotations

import dataclasses
import statistics
import time

import numpy as np

from . import tensor as T
from .codec import Frame, FrameType, PriorStream, densify_motion
from .data import Clip
from .errors import require
from .metrics import psnr, ssim
from .model import ReconConfig, config_from_params, parameter_shapes
from .params import ParamSet
from .pipeline import StepPriors, StreamSession, step, zero_state
from .training import charbonnier  # noqa: F401  (re-exported for reports)


def count_params(params: ParamSet, cfg: ReconConfig) -> int:
    """Total trainable element count; validates the set matches the config."""
    expected = parameter_shapes(cfg)
    names = set(params.names())
    require(
        names == set(expected),
        "parameter set does not match the configuration",
    )
    return sum(params[name].data.size for name in names)


def _conv(c_out: int, c_in: int, k: int, positions: int) -> int:
    return c_out * c_in * k * k * positions


def _sample(channels: int, values_per_channel: int) -> int:
    return 8 * channels * values_per_channel


def step_macs(
    cfg: ReconConfig, width: int, height: int, frame_type: FrameType
) -> dict[str, int]:
    """Analytic per-module MACs of one step at batch 1.

    Mirrors the step graph exactly: every conv contributes
    out_ch * in_ch * k^2 * positions and every bilinear lookup 8 per
    sampled value, so the totals match a metered forward bit for bit.
    """
    c, k, g = cfg.channels, cfg.kernel, cfg.groups
    ksq = k * k
    p = height * width
    out = {"extract": 0, "align": 0, "fuse": 0, "trunk": 0, "head": 0, "skip": 0}

    out["extract"] = _conv(c, 3, k, p) + cfg.extract_blocks * 2 * _conv(c, c, k, p)

    if frame_type is FrameType.I:
        out["trunk"] = cfg.m_blocks * 2 * _conv(c, c, k, p)
    else:
        if cfg.variant == "onlymv":
            out["align"] = 2 * _sample(c, p)
        else:
            out["align"] = (
                2 * _sample(c, p)  # motion warps of both states
                + _conv(c, 3 * c, k, p)  # offset/mask trunk conv1
                + _conv(c, c, k, p)  # offset/mask trunk conv2
                + _conv(2 * ksq * g, c, k, p)  # offset head
                + _conv(ksq * g, c, k, p)  # mask head
                + 2 * (_conv(ksq * c, c, 1, p) + _sample(c, ksq * p))  # both streams
            )
        gate = 0 if cfg.variant == "nogate" else _conv(16, 1, k, p) + _conv(1, 16, k, p)
        out["fuse"] = gate + _conv(c, 3 * c, k, p)
        out["trunk"] = cfg.n_blocks * 2 * _conv(c, c, k, p)

    out["head"] = (
        _conv(4 * (c // 2), c, k, p)
        + _conv(4 * (c // 4), c // 2, k, 4 * p)
        + _conv(3, c // 4, k, 16 * p)
    )
    out["skip"] = _sample(3, 16 * p)
    out["total"] = sum(out.values())
    return out


def count_macs(
    cfg: ReconConfig, lr_resolution: tuple[int, int], gop: int
) -> float:
    """Per-frame MACs averaged over one GOP (1 I-frame, gop-1 P-frames).

    lr_resolution is (width, height) of the low-resolution input.
    """
    width, height = lr_resolution
    require(width >= 1 and height >= 1 and gop >= 1, "bad resolution or gop")
    i_total = step_macs(cfg, width, height, FrameType.I)["total"]
    p_total = step_macs(cfg, width, height, FrameType.P)["total"]
    return (i_total + (gop - 1) * p_total) / gop


def gop_macs(cfg: ReconConfig, lr_resolution: tuple[int, int], gop: int) -> int:
    """Exact integer MAC total of one GOP; count_macs is this over gop."""
    width, height = lr_resolution
    require(width >= 1 and height >= 1 and gop >= 1, "bad resolution or gop")
    i_total = step_macs(cfg, width, height, FrameType.I)["total"]
    p_total = step_macs(cfg, width, height, FrameType.P)["total"]
    return i_total + (gop - 1) * p_total


def measure_step_macs(
    params: ParamSet,
    cfg: ReconConfig,
    width: int,
    height: int,
    frame_type: FrameType,
) -> int:
    """Instrumented MACs of one forward step on synthetic inputs.

    The counter sits inside the tensor ops, so this is what the graph
    actually executed; values are irrelevant to the count.
    """
    rng = np.random.default_rng(0)
    lr = T.constant(rng.random((1, 3, height, width)).astype(T.default_dtype().type))
    if frame_type is FrameType.I:
        priors = StepPriors(
            frame_type=FrameType.I,
            dense_motion=np.zeros((1, 2, height, width), dtype=lr.dtype),
            residual=np.zeros((1, 1, height, width), dtype=lr.dtype),
        )
        state = None
    else:
        priors = StepPriors(
            frame_type=FrameType.P,
            dense_motion=np.zeros((1, 2, height, width), dtype=lr.dtype),
            residual=rng.random((1, 1, height, width)).astype(lr.dtype) * 0.1,
        )
        state = zero_state(cfg, 1, height, width, lr.dtype)
    with T.mac_counter() as counter:
        step(params, cfg, lr, priors, state)
    return counter.total


def measure_alignment_macs(
    params: ParamSet, cfg: ReconConfig, width: int, height: int
) -> int:
    """Instrumented MACs of the alignment stage alone on a P-frame."""
    from .alignment import align_dual

    dt = T.default_dtype()
    state = zero_state(cfg, 1, height, width, dt)
    current = T.zeros((1, cfg.channels, height, width), dtype=dt)
    motion = np.zeros((1, 2, height, width), dtype=dt)
    with T.mac_counter() as counter:
        align_dual(params, cfg, state.low, state.high, current, motion)
    return counter.total


@dataclasses.dataclass
class TimingReport:
    """Per-frame wall-clock medians of a streamed forward pass."""

    frame_ms: list[float]  # median over repeats, per frame position
    frame_types: list[FrameType]
    median_ms: float
    median_i_ms: float  # nan when a type is absent
    median_p_ms: float
    fps: float

    def lines(self) -> list[str]:
        return [
            f"frames: {len(self.frame_ms)}",
            f"median per-frame: {self.median_ms:.2f} ms ({self.fps:.1f} fps)",
            f"median I-frame:   {self.median_i_ms:.2f} ms",
            f"median P-frame:   {self.median_p_ms:.2f} ms",
        ]


def benchmark_latency(
    model: StreamSession,
    stream: tuple[list[Frame], PriorStream],
    repeats: int = 5,
    warmup_frames: int = 3,
) -> TimingReport:
    """Median per-frame latency of a stream, split by frame type.

    Runs the stream `repeats` times after a short warm-up pass (first
    frames only) so one-time compilation and allocation costs do not
    pollute the medians. Strictly sequential; callers are expected to
    quiesce other load.
    """
    frames, priors = stream
    require(len(frames) == len(priors.frames), "frame count does not match priors")
    require(len(frames) >= 1 and repeats >= 1, "empty stream or repeats < 1")

    model.reset()
    for frame, record in zip(frames[:warmup_frames], priors.frames[:warmup_frames]):
        model.process(frame, record)

    per_frame: list[list[float]] = [[] for _ in frames]
    for _ in range(repeats):
        model.reset()
        for t, (frame, record) in enumerate(zip(frames, priors.frames)):
            start = time.perf_counter()
            model.process(frame, record)
            per_frame[t].append((time.perf_counter() - start) * 1000.0)

    frame_ms = [statistics.median(times) for times in per_frame]
    types = [r.frame_type for r in priors.frames]
    i_times = [ms for ms, ft in zip(frame_ms, types) if ft is FrameType.I]
    p_times = [ms for ms, ft in zip(frame_ms, types) if ft is FrameType.P]
    med = statistics.median(frame_ms)
    return TimingReport(
        frame_ms=frame_ms,
        frame_types=types,
        median_ms=med,
        median_i_ms=statistics.median(i_times) if i_times else float("nan"),
        median_p_ms=statistics.median(p_times) if p_times else float("nan"),
        fps=1000.0 / med if med > 0 else float("inf"),
    )


@dataclasses.dataclass
class FrameMetrics:
    index: int
    psnr: float
    ssim: float
    ms: float
    frame_type: FrameType


def write_frame_csv(path: str, rows: list[FrameMetrics]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "psnr", "ssim", "ms", "frame_type"])
        for r in rows:
            writer.writerow(
                [r.index, f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.ms:.3f}", r.frame_type.name]
            )


@dataclasses.dataclass
class AblationRow:
    variant: str
    psnr: float
    ssim: float
    median_ms: float
    align_macs: int


def run_ablation(
    variants: list[str],
    dataset: list[Clip],
    weights_per_variant: dict[str, ParamSet],
) -> list[AblationRow]:
    """Evaluate trained variant weights on encoded clips, one row each.

    Reports mean PSNR/SSIM against the ground truth, the median per-frame
    latency over the first clip, and the instrumented alignment MACs at
    the clip resolution. Training the weights is the caller's job; budgets
    and seeds must match across variants for the rows to be comparable.
    """
    require(len(dataset) >= 1, "ablation needs at least one clip")
    for clip in dataset:
        require(
            clip.decoded is not None and clip.priors is not None,
            "ablation clips need decoded frames and priors",
        )
    rows = []
    for variant in variants:
        require(variant in weights_per_variant, f"missing weights for {variant}")
        params = weights_per_variant[variant]
        cfg = config_from_params(params, variant=variant)
        psnrs: list[float] = []
        ssims: list[float] = []
        for clip in dataset:
            session = StreamSession(params, cfg)
            for frame, record, gt in zip(
                clip.decoded, clip.priors.frames, clip.hr
            ):
                sr = session.process(frame, record)
                psnrs.append(psnr(sr, gt))
                ssims.append(ssim(sr, gt))
        first = dataset[0]
        timing = benchmark_latency(
            StreamSession(params, cfg), (first.decoded, first.priors), repeats=1
        )
        rows.append(
            AblationRow(
                variant=variant,
                psnr=float(np.mean(psnrs)),
                ssim=float(np.mean(ssims)),
                median_ms=timing.median_ms,
                align_macs=measure_alignment_macs(
                    params, cfg, first.priors.width, first.priors.height
                ),
            )
        )
    return rows


def write_ablation_csv(path: str, rows: list[AblationRow]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "psnr", "ssim", "median_ms", "align_macs"])
        for r in rows:
            writer.writerow(
                [r.variant, f"{r.psnr:.4f}", f"{r.ssim:.6f}", f"{r.median_ms:.3f}", r.align_macs]
            )


def render_report(title: str, fields: dict[str, object]) -> str:
    """Plain-text summary block: one aligned `key: value` line per field."""
    width = max(len(k) for k in fields) if fields else 0
    lines = [title] + [f"  {k.ljust(width)} : {v}" for k, v in fields.items()]
    return "\n".join(lines)
