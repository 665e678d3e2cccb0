"""Residual gate and gated fusion."""

import numpy as np
import pytest

import codecsr.tensor as T
from codecsr.fusion import compute_gate, fuse
from codecsr.model import build_params
from codecsr.verify import TINY_CONFIG


def feats(rng, cfg, n=1, h=6, w=7):
    return T.constant(rng.standard_normal((n, cfg.channels, h, w)).astype(np.float32))


def test_gate_shape_and_range():
    cfg = TINY_CONFIG
    params = build_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    residual = T.constant(rng.random((2, 1, 6, 7)).astype(np.float32) * 0.05)
    gate = compute_gate(params, cfg, residual)
    assert gate.dims == (2, 1, 6, 7)
    assert gate.data.min() > 0.0 and gate.data.max() < 1.0


def test_gate_matches_manual_graph():
    cfg = TINY_CONFIG
    params = build_params(cfg, seed=1)
    rng = np.random.default_rng(1)
    residual = T.constant(rng.random((1, 1, 5, 5)).astype(np.float32) * 0.05)
    gate = compute_gate(params, cfg, residual)
    feat = T.leaky_relu(
        T.conv2d(residual, params["rmgf.fres.conv1.weight"], params["rmgf.fres.conv1.bias"], padding=1),
        0.1,
    )
    raw = T.conv2d(feat, params["rmgf.fres.conv2.weight"], params["rmgf.fres.conv2.bias"], padding=1)
    np.testing.assert_array_equal(gate.data, T.sigmoid(raw).data)


def test_nogate_variant_returns_ones():
    cfg = TINY_CONFIG.with_variant("nogate")
    params = build_params(cfg, seed=2)
    residual = T.constant(np.random.default_rng(2).random((3, 1, 4, 4)).astype(np.float32))
    gate = compute_gate(params, cfg, residual)
    assert gate.dims == (3, 1, 4, 4)
    np.testing.assert_array_equal(gate.data, np.ones((3, 1, 4, 4), dtype=np.float32))


def test_zero_gate_erases_aligned_streams():
    """With the gate forced to zero the aligned inputs cannot matter."""
    cfg = TINY_CONFIG
    params = build_params(cfg, seed=3)
    rng = np.random.default_rng(3)
    cur = feats(rng, cfg)
    zero_gate = T.constant(np.zeros((1, 1, 6, 7), dtype=np.float32))
    out_a = fuse(params, cfg, zero_gate, feats(rng, cfg), feats(rng, cfg), cur)
    out_b = fuse(params, cfg, zero_gate, feats(rng, cfg), feats(rng, cfg), cur)
    np.testing.assert_array_equal(out_a.data, out_b.data)


def test_unit_gate_passes_streams_through():
    """A unit gate makes fuse depend on the aligned features."""
    cfg = TINY_CONFIG
    params = build_params(cfg, seed=4)
    rng = np.random.default_rng(4)
    cur = feats(rng, cfg)
    ones = T.constant(np.ones((1, 1, 6, 7), dtype=np.float32))
    out_a = fuse(params, cfg, ones, feats(rng, cfg), feats(rng, cfg), cur)
    out_b = fuse(params, cfg, ones, feats(rng, cfg), feats(rng, cfg), cur)
    assert np.abs(out_a.data - out_b.data).max() > 0.0


def test_fuse_output_shape():
    cfg = TINY_CONFIG
    params = build_params(cfg, seed=5)
    rng = np.random.default_rng(5)
    gate = T.constant(rng.random((1, 1, 6, 7)).astype(np.float32))
    out = fuse(params, cfg, gate, feats(rng, cfg), feats(rng, cfg), feats(rng, cfg))
    assert out.dims == (1, cfg.channels, 6, 7)


def test_gate_responds_to_residual_magnitude():
    """After nudging the gate head, larger residuals move the gate."""
    cfg = TINY_CONFIG
    params = build_params(cfg, seed=6)
    rng = np.random.default_rng(6)
    updates = {}
    for name in ("rmgf.fres.conv1.weight", "rmgf.fres.conv2.weight"):
        value = params[name]
        updates[name] = T.Tensor((0.3 * rng.standard_normal(value.dims)).astype(np.float32))
    params = params.replace(updates)
    low = T.constant(np.zeros((1, 1, 8, 8), dtype=np.float32))
    high = T.constant(np.full((1, 1, 8, 8), 0.2, dtype=np.float32))
    g_low = compute_gate(params, cfg, low)
    g_high = compute_gate(params, cfg, high)
    assert np.abs(g_high.data - g_low.data).max() > 1e-4
