"""End-to-end gradient audit on a tiny configuration.

Builds a 3-frame coded stream (one I-frame, two P-frames), rolls the full
recurrent graph in 64-bit mode, and compares every parameter's taped
gradient against central finite differences. Small enough to run in
seconds yet it exercises every differentiable operation in one graph:
convs, warps, the deformable gather, gating, trunks, and the loss.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .codec import Frame, encode_lr
from .model import ReconConfig, build_params
from .params import ParamSet
from .pipeline import StepPriors, step
from .tensor import Tensor
from .training import charbonnier

TINY_CONFIG = ReconConfig(
    channels=4, m_blocks=1, n_blocks=1, extract_blocks=1, groups=2
)


def tiny_rollout_inputs(seed: int = 0):
    """Deterministic 3-frame inputs for the end-to-end check."""
    rng = np.random.default_rng(seed)
    frames = [Frame(rng.random((10, 12, 3)).astype(np.float32)) for _ in range(3)]
    decoded, stream = encode_lr(frames, gop=3, block_size=4, search=2, quant=4)
    lrs = [
        T.constant(
            np.ascontiguousarray(f.data.transpose(2, 0, 1)[None]).astype(np.float64)
        )
        for f in decoded
    ]
    priors = [StepPriors.from_record(r, 10, 12, np.float64) for r in stream.frames]
    targets = [T.constant(rng.random((1, 3, 40, 48))) for _ in range(3)]
    return lrs, priors, targets


def rollout_loss(
    params: ParamSet, cfg: ReconConfig, lrs, priors, targets
) -> Tensor:
    state = None
    total = None
    for t in range(len(lrs)):
        sr, state = step(params, cfg, lrs[t], priors[t], state)
        frame_loss = charbonnier(sr, targets[t], 1e-3)
        total = frame_loss if total is None else T.add(total, frame_loss)
    return T.mul_scalar(total, 1.0 / len(lrs))


def end_to_end_gradcheck(
    seed: int = 0, samples_per_param: int = 3, step_size: float = 1e-5
) -> tuple[float, str]:
    """Worst relative gradient error over all parameters, and its owner.

    Runs in float64; parameters are jittered away from their zero
    initializations so none of the heads sit in flat regions.
    """
    with T.precision("float64"):
        cfg = TINY_CONFIG
        params = build_params(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed + 1)
        jittered = {}
        for name in params.names():
            t = params[name]
            jittered[name] = Tensor(
                t.data + rng.normal(0.0, 0.05, t.data.shape),
                requires_grad=True,
                copy=False,
            )
        params = params.replace(jittered)
        lrs, priors, targets = tiny_rollout_inputs(seed)

        with T.Tape() as tape:
            loss = rollout_loss(params, cfg, lrs, priors, targets)
        grads = tape.gradients(loss)

        pick = np.random.default_rng(seed + 2)
        worst = 0.0
        worst_name = ""
        for name in params.names():
            holder = params[name]
            analytic = grads[holder].reshape(-1)
            base = holder.data
            count = min(samples_per_param, base.size)
            for flat in pick.choice(base.size, size=count, replace=False):
                flat = int(flat)
                probes = []
                for sign in (1.0, -1.0):
                    arr = base.copy().reshape(-1)
                    arr[flat] += sign * step_size
                    probe_set = params.replace(
                        {name: Tensor(arr.reshape(base.shape), copy=False)}
                    )
                    probes.append(
                        rollout_loss(probe_set, cfg, lrs, priors, targets).item()
                    )
                numeric = (probes[0] - probes[1]) / (2.0 * step_size)
                ref = analytic[flat]
                rel = abs(ref - numeric) / max(abs(ref), abs(numeric), 1.0)
                if rel > worst:
                    worst = rel
                    worst_name = name
        return worst, worst_name
