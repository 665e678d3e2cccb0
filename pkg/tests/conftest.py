"""Shared fixtures for the test suite.

The expensive micro-trainings live here as session-scoped fixtures so the
acceptance criteria that share weights (training gain, gate behavior,
ablation trends) pay for each training exactly once per run.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest

from codecsr.data import build_dataset
from codecsr.model import DESK_CONFIG, build_params
from codecsr.training import TrainConfig, train


@dataclasses.dataclass
class TrainingRun:
    params: object
    cfg: object
    history: list
    clips: list
    elapsed_s: float


@pytest.fixture(scope="session")
def desk_training():
    """Micro-training at desk config on the small-motion synthetic set.

    Ten 15-frame clips at 192x192 (48x48 after the x4 downscale), 2000
    iterations, fixed seed. Used by the training-gain and gate-behavior
    criteria.
    """
    clips = build_dataset(
        seed=101, clips=10, height=192, width=192, frames=15,
        motion="small", encode=True, gop=8,
    )
    cfg = DESK_CONFIG
    tc = TrainConfig(iters=2000, seed=7)
    params = build_params(cfg, seed=7)
    start = time.time()
    params, history = train(params, cfg, tc, clips)
    return TrainingRun(
        params=params, cfg=cfg, history=history, clips=clips,
        elapsed_s=time.time() - start,
    )


@pytest.fixture(scope="session")
def heldout_clips():
    """Small-motion clips the desk training never saw, encoded."""
    return build_dataset(
        seed=202, clips=4, height=192, width=192, frames=15,
        motion="small", encode=True, gop=8,
    )


@pytest.fixture(scope="session")
def ablation_training():
    """Four variants trained under one identical micro budget and seed.

    Large-motion clips stress the alignment path, which is what separates
    the variants. Returns {variant: (params, cfg)} plus the shared eval
    sets.
    """
    train_clips = build_dataset(
        seed=303, clips=8, height=192, width=192, frames=15,
        motion="large", encode=True, gop=8,
    )
    eval_clips = build_dataset(
        seed=404, clips=4, height=192, width=192, frames=15,
        motion="large", encode=True, gop=8,
    )
    runs = {}
    for variant in ("full", "onlydcn", "onlymv", "nogate"):
        cfg = DESK_CONFIG.with_variant(variant)
        tc = TrainConfig(iters=700, seed=11)
        params = build_params(cfg, seed=11)
        params, _ = train(params, cfg, tc, train_clips)
        runs[variant] = (params, cfg)
    return {"runs": runs, "train_clips": train_clips, "eval_clips": eval_clips}
