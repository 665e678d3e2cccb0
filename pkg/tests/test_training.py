"""Optimizer pieces, batch sampling, and a short end-to-end train run."""

import math

import numpy as np
import pytest

import codecsr.tensor as T
from codecsr.codec import FrameType
from codecsr.data import build_dataset, synthesize_clip
from codecsr.errors import ContractViolation
from codecsr.model import build_params
from codecsr.training import (
    AdamState,
    TrainConfig,
    adam_step,
    charbonnier,
    cosine_lr,
    evaluate_stream_psnr,
    moving_average,
    sample_batch,
    train,
)
from codecsr.verify import TINY_CONFIG


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 2e-4, 1e-7) == pytest.approx(2e-4)
    assert cosine_lr(100, 100, 2e-4, 1e-7) == pytest.approx(1e-7)
    mid = cosine_lr(50, 100, 2e-4, 1e-7)
    assert mid == pytest.approx((2e-4 + 1e-7) / 2.0)
    # monotone decreasing over the schedule
    values = [cosine_lr(i, 100, 2e-4, 1e-7) for i in range(101)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_charbonnier_closed_form():
    pred = T.constant(np.full((1, 1, 2, 2), 0.7, dtype=np.float32))
    target = T.constant(np.full((1, 1, 2, 2), 0.4, dtype=np.float32))
    eps = 1e-3
    want = math.sqrt(0.3**2 + eps**2)
    assert charbonnier(pred, target, eps).item() == pytest.approx(want, rel=1e-6)
    # at zero error the loss floors at eps
    same = charbonnier(target, target, eps).item()
    assert same == pytest.approx(eps, rel=1e-6)


def test_adam_step_hand_computed():
    """First and second Adam updates against the textbook recurrence."""
    from codecsr.params import ParamSet

    w0 = np.array([[[[1.0]], [[-2.0]]]], dtype=np.float32)  # (1, 2, 1, 1)
    params = ParamSet()
    params.add("w", T.Tensor(w0.copy()))
    lr, b1, b2, eps = 0.1, 0.9, 0.99, 1e-8
    state = AdamState()
    g1 = np.array([[[[0.5]], [[-1.0]]]], dtype=np.float32)

    class FakeGrads:
        def __init__(self, mapping):
            self.mapping = mapping

        def __getitem__(self, tensor):
            return self.mapping[id(tensor)]

    params = adam_step(
        params, FakeGrads({id(params["w"]): g1}), state, lr, b1, b2, eps
    )
    m = (1 - b1) * g1
    v = (1 - b2) * g1 * g1
    want = w0 - (lr / (1 - b1)) * m / (np.sqrt(v / (1 - b2)) + eps)
    np.testing.assert_allclose(params["w"].data, want, rtol=1e-6)

    g2 = np.array([[[[-0.25]], [[0.75]]]], dtype=np.float32)
    prev = params["w"].data.copy()
    params = adam_step(
        params, FakeGrads({id(params["w"]): g2}), state, lr, b1, b2, eps
    )
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 * g2
    want = prev - (lr / (1 - b1**2)) * m / (np.sqrt(v / (1 - b2**2)) + eps)
    np.testing.assert_allclose(params["w"].data, want, rtol=1e-6)
    assert state.steps == 2


def test_adam_skips_frozen_parameters():
    from codecsr.params import ParamSet

    params = ParamSet()
    params.add("w", T.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)))
    params.add(
        "frozen", T.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)), trainable=False
    )
    grads = {id(params["w"]): np.full((1, 1, 1, 1), 0.5, dtype=np.float32)}

    class FakeGrads:
        def __getitem__(self, tensor):
            return grads[id(tensor)]

    out = adam_step(params, FakeGrads(), AdamState(), 0.1)
    assert out["frozen"].data[0, 0, 0, 0] == 1.0
    assert out["w"].data[0, 0, 0, 0] != 1.0


def test_moving_average_trailing_window():
    values = [1.0, 2.0, 3.0, 4.0, 5.0]
    got = moving_average(values, 3)
    want = [1.0, 1.5, 2.0, 3.0, 4.0]
    assert got == pytest.approx(want)


def test_sample_batch_shapes_and_intra_start():
    tc = TrainConfig(
        iters=1, batch=2, clip_len=4, crop=16, gop=4, block_size=4, search=2, seed=0
    )
    clips = build_dataset(seed=1, clips=2, height=96, width=96, frames=6)
    rng = np.random.default_rng(0)
    batch = sample_batch(rng, clips, tc)
    assert len(batch.lr) == 4 and len(batch.priors) == 4 and len(batch.target) == 4
    assert batch.lr[0].dims == (2, 3, 16, 16)
    assert batch.target[0].dims == (2, 3, 64, 64)
    # re-encoded windows always open with an I-frame, then P under gop=4
    assert batch.priors[0].frame_type is FrameType.I
    assert all(batch.priors[t].frame_type is FrameType.P for t in (1, 2, 3))
    assert batch.priors[1].dense_motion.shape == (2, 2, 16, 16)
    assert batch.priors[1].residual.shape == (2, 1, 16, 16)


def test_sample_batch_is_seed_deterministic():
    tc = TrainConfig(
        iters=1, batch=1, clip_len=3, crop=16, gop=4, block_size=4, search=2, seed=0
    )
    clips = build_dataset(seed=2, clips=2, height=96, width=96, frames=5)
    a = sample_batch(np.random.default_rng(7), clips, tc)
    b = sample_batch(np.random.default_rng(7), clips, tc)
    for t in range(3):
        np.testing.assert_array_equal(a.lr[t].data, b.lr[t].data)
        np.testing.assert_array_equal(a.target[t].data, b.target[t].data)
        np.testing.assert_array_equal(
            a.priors[t].dense_motion, b.priors[t].dense_motion
        )


def test_sample_batch_rejects_short_clips():
    tc = TrainConfig(
        iters=1, batch=1, clip_len=9, crop=16, gop=4, block_size=4, search=2
    )
    clips = build_dataset(seed=3, clips=1, height=96, width=96, frames=5)
    with pytest.raises(ContractViolation):
        sample_batch(np.random.default_rng(0), clips, tc)


def test_train_config_validation():
    with pytest.raises(ContractViolation):
        TrainConfig(crop=30, block_size=8)
    with pytest.raises(ContractViolation):
        TrainConfig(iters=0)


def test_train_smoke_reduces_nothing_but_runs():
    """Three iterations: loss is finite, history aligns, params change."""
    cfg = TINY_CONFIG
    params = build_params(cfg, seed=4)
    tc = TrainConfig(
        iters=3, batch=1, clip_len=3, crop=16, gop=4, block_size=4, search=2,
        lr=1e-3, seed=4,
    )
    clips = build_dataset(seed=4, clips=2, height=96, width=96, frames=5)
    before = {n: v.data.copy() for n, v in params.trainable_items()}
    seen = []
    trained, history = train(params, cfg, tc, clips, progress=seen.append)
    assert len(history) == 3 and len(seen) == 3
    assert all(np.isfinite(r.loss) for r in history)
    assert history[0].lr == pytest.approx(1e-3)
    changed = sum(
        1
        for n, v in trained.trainable_items()
        if np.abs(v.data - before[n]).max() > 0
    )
    assert changed == len(before)


def test_train_is_bitwise_repeatable():
    cfg = TINY_CONFIG
    tc = TrainConfig(
        iters=2, batch=1, clip_len=3, crop=16, gop=4, block_size=4, search=2, seed=5
    )
    clips = build_dataset(seed=5, clips=1, height=96, width=96, frames=5)
    p1, h1 = train(build_params(cfg, seed=5), cfg, tc, clips)
    p2, h2 = train(build_params(cfg, seed=5), cfg, tc, clips)
    assert [r.loss for r in h1] == [r.loss for r in h2]
    for (n1, v1), (_, v2) in zip(p1.items(), p2.items()):
        np.testing.assert_array_equal(v1.data, v2.data, err_msg=n1)


def test_evaluate_stream_psnr_requires_encoded_clips():
    cfg = TINY_CONFIG
    params = build_params(cfg, seed=6)
    plain = build_dataset(seed=6, clips=1, height=64, width=64, frames=3)
    with pytest.raises(ContractViolation):
        evaluate_stream_psnr(params, cfg, plain)
    encoded = build_dataset(
        seed=6, clips=1, height=64, width=64, frames=3, encode=True,
        gop=4, block_size=4, search=2,
    )
    scores = evaluate_stream_psnr(params, cfg, encoded)
    assert set(scores) == {"psnr", "bilinear_psnr", "gain"}
    # zero-initialized heads leave exactly the bilinear baseline
    assert scores["gain"] == pytest.approx(0.0, abs=1e-9)


def test_synthesize_clip_motion_classes():
    rng = np.random.default_rng(7)
    small = synthesize_clip(rng, height=64, width=64, frames=3, motion="small")
    assert len(small) == 3 and small[0].data.shape == (64, 64, 3)
    assert small[0].data.min() >= 0.0 and small[0].data.max() <= 1.0
    with pytest.raises(ContractViolation):
        synthesize_clip(rng, motion="medium")
