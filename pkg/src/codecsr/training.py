"""Training loop: sampling, loss, optimizer, schedule.

Each iteration samples a batch of clip windows, re-runs the codec on the
augmented low-resolution crops so the priors exactly describe what the
network sees, rolls the recurrent step over the window with gradients on,
and takes one Adam step on a Charbonnier loss against the high-resolution
crops. Sampling, augmentation, and initialization all derive from seeds,
so runs repeat bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .codec import Frame, encode_lr
from .data import Clip
from .errors import require
from .metrics import psnr
from .model import ReconConfig
from .params import ParamSet
from .pipeline import StepPriors, run_stream, step
from .tensor import Tensor


@dataclasses.dataclass
class TrainConfig:
    iters: int = 2000
    batch: int = 2
    clip_len: int = 7
    crop: int = 32  # low-resolution crop side
    lr: float = 2e-4
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    charb_eps: float = 1e-3
    scale: int = 4
    gop: int = 8
    block_size: int = 8
    search: int = 8
    quant: int = 4
    seed: int = 0

    def __post_init__(self):
        require(self.crop % self.block_size == 0, "crop must be a block multiple")
        require(self.batch >= 1 and self.clip_len >= 1 and self.iters >= 1, "bad sizes")


def charbonnier(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2)), a smooth L1."""
    d = T.sub(pred, target)
    return T.mean_all(T.sqrt(T.add_scalar(T.mul(d, d), eps * eps)))


def cosine_lr(iteration: int, total: int, lr_init: float, lr_min: float) -> float:
    """Half-cosine decay from lr_init at iteration 0 toward lr_min."""
    return lr_min + 0.5 * (lr_init - lr_min) * (
        1.0 + math.cos(math.pi * iteration / total)
    )


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps = 0


def adam_step(
    params: ParamSet,
    grads: T.Grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> ParamSet:
    """One bias-corrected Adam update over the trainable parameters."""
    state.steps += 1
    t = state.steps
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    updates: dict[str, Tensor] = {}
    for name, value in params.trainable_items():
        g = grads[value].astype(np.float32, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(value.dims, dtype=np.float32)
            state.v[name] = np.zeros(value.dims, dtype=np.float32)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        step_arr = value.data - (lr / c1) * m / (np.sqrt(v / c2) + eps)
        updates[name] = Tensor(step_arr.astype(np.float32, copy=False), copy=False)
    return params.replace(updates)


_AUG_FLIPS = ((False, False), (True, False), (False, True), (True, True))


def _augment(arr: np.ndarray, flip_x: bool, flip_y: bool, quarter_turns: int) -> np.ndarray:
    if flip_x:
        arr = arr[:, ::-1]
    if flip_y:
        arr = arr[::-1]
    if quarter_turns:
        arr = np.rot90(arr, quarter_turns, axes=(0, 1))
    return np.ascontiguousarray(arr)


@dataclasses.dataclass
class Batch:
    lr: list[Tensor]  # per time step, (N, 3, crop, crop)
    priors: list[StepPriors]
    target: list[Tensor]  # per time step, (N, 3, 4*crop, 4*crop)


def sample_batch(
    rng: np.random.Generator,
    clips: list[Clip],
    tc: TrainConfig,
    clip_ids: list[int] | None = None,
) -> Batch:
    """Draw windows, crop, augment, and re-encode so priors match crops.

    Re-encoding each cropped window (rather than cropping precomputed
    priors) keeps motion search and quantization exact for what the
    network actually sees; the window therefore opens with an I-frame.
    clip_ids, when given, fixes which clip each batch element reads
    (the trainer passes a shuffled-epoch order); windows and augmentation
    still come from rng.
    """
    n, tlen, crop = tc.batch, tc.clip_len, tc.crop
    if clip_ids is not None:
        require(len(clip_ids) == n, "need one clip id per batch element")
    per_element: list[tuple[list[Frame], list[StepPriors], list[np.ndarray]]] = []
    for b in range(n):
        pick = clip_ids[b] if clip_ids is not None else int(rng.integers(len(clips)))
        clip = clips[pick]
        require(len(clip) >= tlen, "clip shorter than the training window")
        lr_h, lr_w = clip.lr_source[0].height, clip.lr_source[0].width
        require(lr_h >= crop and lr_w >= crop, "clip smaller than the crop")
        t0 = int(rng.integers(len(clip) - tlen + 1))
        y = int(rng.integers(lr_h - crop + 1))
        x = int(rng.integers(lr_w - crop + 1))
        flip_x, flip_y = _AUG_FLIPS[rng.integers(4)]
        turns = int(rng.integers(4))
        lr_crops = []
        gt_crops = []
        for t in range(t0, t0 + tlen):
            lr_arr = clip.lr_source[t].data[y : y + crop, x : x + crop]
            hr_arr = clip.hr[t].data[
                tc.scale * y : tc.scale * (y + crop),
                tc.scale * x : tc.scale * (x + crop),
            ]
            lr_crops.append(Frame(_augment(lr_arr, flip_x, flip_y, turns)))
            gt_crops.append(_augment(hr_arr, flip_x, flip_y, turns))
        decoded, stream = encode_lr(
            lr_crops,
            gop=tc.gop,
            block_size=tc.block_size,
            search=tc.search,
            quant=tc.quant,
        )
        priors = [
            StepPriors.from_record(r, crop, crop, T.default_dtype())
            for r in stream.frames
        ]
        per_element.append((decoded, priors, gt_crops))

    lr_steps = []
    prior_steps = []
    target_steps = []
    for t in range(tlen):
        lr_stack = np.stack(
            [e[0][t].data.transpose(2, 0, 1) for e in per_element]
        ).astype(T.default_dtype().type)
        gt_stack = np.stack(
            [e[2][t].transpose(2, 0, 1) for e in per_element]
        ).astype(T.default_dtype().type)
        lr_steps.append(T.constant(np.ascontiguousarray(lr_stack)))
        target_steps.append(T.constant(np.ascontiguousarray(gt_stack)))
        prior_steps.append(StepPriors.stack([e[1][t] for e in per_element]))
    return Batch(lr=lr_steps, priors=prior_steps, target=target_steps)


@dataclasses.dataclass
class TrainRecord:
    iteration: int
    loss: float
    lr: float


def train(
    params: ParamSet,
    cfg: ReconConfig,
    tc: TrainConfig,
    clips: list[Clip],
    progress=None,
) -> tuple[ParamSet, list[TrainRecord]]:
    """Optimize params on clip windows; returns updated params and a log.

    Clips are visited in shuffled epochs rather than independent draws, so
    any loss-curve window sees a near-uniform clip mix and short-window
    averages stay comparable across the run.
    """
    rng = np.random.default_rng(tc.seed)
    adam = AdamState()
    history: list[TrainRecord] = []
    inv_len = 1.0 / tc.clip_len
    order: list[int] = []
    for i in range(tc.iters):
        lr_now = cosine_lr(i, tc.iters, tc.lr, tc.lr_min)
        while len(order) < tc.batch:
            order.extend(int(j) for j in rng.permutation(len(clips)))
        ids, order = order[: tc.batch], order[tc.batch :]
        batch = sample_batch(rng, clips, tc, clip_ids=ids)
        with T.Tape() as tape:
            state = None
            total = None
            for t in range(tc.clip_len):
                sr, state = step(params, cfg, batch.lr[t], batch.priors[t], state)
                frame_loss = charbonnier(sr, batch.target[t], tc.charb_eps)
                total = frame_loss if total is None else T.add(total, frame_loss)
            loss = T.mul_scalar(total, inv_len)
        grads = tape.gradients(loss)
        params = adam_step(
            params, grads, adam, lr_now, tc.beta1, tc.beta2, tc.adam_eps
        )
        record = TrainRecord(iteration=i, loss=loss.item(), lr=lr_now)
        history.append(record)
        if progress is not None:
            progress(record)
    return params, history


def moving_average(values: list[float], window: int) -> list[float]:
    """Trailing mean; entry i averages the window ending at i."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def evaluate_stream_psnr(
    params: ParamSet, cfg: ReconConfig, clips: list[Clip]
) -> dict[str, float]:
    """Mean PSNR of enhanced output and of the bilinear baseline.

    Clips must carry decoded frames and priors. The baseline upsamples the
    same decoded frames bilinearly, so the difference is exactly what the
    network adds.
    """
    from .pipeline import frame_to_tensor, tensor_to_frames

    net_scores = []
    base_scores = []
    for clip in clips:
        require(clip.decoded is not None and clip.priors is not None,
                "evaluation clips need decoded frames and priors")
        out = run_stream(params, cfg, clip.decoded, clip.priors)
        for sr, dec, gt in zip(out, clip.decoded, clip.hr):
            up = tensor_to_frames(
                T.upsample_bilinear(frame_to_tensor(dec), cfg.scale)
            )[0]
            net_scores.append(psnr(sr, gt))
            base_scores.append(psnr(up, gt))
    return {
        "psnr": float(np.mean(net_scores)),
        "bilinear_psnr": float(np.mean(base_scores)),
        "gain": float(np.mean(net_scores) - np.mean(base_scores)),
    }
