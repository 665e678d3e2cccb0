"""Forward-pass oracles for the tensor engine.

Every structured op is checked against an independent naive-loop
implementation written directly from the math, in float64, over seeded
randomized instances. Pointwise ops are checked against numpy scalar
formulas. Tolerances: 1e-5 absolute for 32-bit structured ops, tighter
where the op is exact.
"""

import numpy as np
import pytest

import codecsr.tensor as T
from codecsr.errors import ContractViolation


def naive_conv2d(x, w, b, stride, padding):
    """Direct quadruple-loop convolution (cross-correlation), float64."""
    x = x.astype(np.float64)
    w = w.astype(np.float64)
    n, c_in, h, win = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, win + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + win] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (win + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for i in range(n):
        for o in range(c_out):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for dy in range(k):
                            for dx in range(k):
                                acc += (
                                    xp[i, ci, y * stride + dy, xx * stride + dx]
                                    * w[o, ci, dy, dx]
                                )
                    out[i, o, y, xx] = acc
    if b is not None:
        out += b.astype(np.float64).reshape(1, c_out, 1, 1)
    return out


def naive_bilinear(x, coords):
    """Scalar-loop border-clamped bilinear lookup, float64."""
    x = x.astype(np.float64)
    coords = coords.astype(np.float64)
    n, c, h, w = x.shape
    _, _, ho, wo = coords.shape
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for y in range(ho):
            for xx in range(wo):
                sx = min(max(coords[i, 0, y, xx], 0.0), w - 1.0)
                sy = min(max(coords[i, 1, y, xx], 0.0), h - 1.0)
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                fx = sx - x0
                fy = sy - y0
                for ci in range(c):
                    top = x[i, ci, y0, x0] * (1 - fx) + x[i, ci, y0, x1] * fx
                    bot = x[i, ci, y1, x0] * (1 - fx) + x[i, ci, y1, x1] * fx
                    out[i, ci, y, xx] = top * (1 - fy) + bot * fy
    return out


def naive_deform_gather(taps, delta, mask, base, groups):
    """Masked multi-tap gather directly from its definition, float64."""
    taps = taps.astype(np.float64)
    delta = delta.astype(np.float64)
    mask = mask.astype(np.float64)
    base = base.astype(np.float64)
    n, tc, h, w = taps.shape
    ksq = mask.shape[1] // groups
    k = int(round(np.sqrt(ksq)))
    c = tc // ksq
    half = (k - 1) // 2
    out = np.zeros((n, c, h, w))
    for i in range(n):
        for ch in range(c):
            g = ch * groups // c
            for y in range(h):
                for xx in range(w):
                    acc = 0.0
                    for t in range(ksq):
                        dy, dx = divmod(t, k)
                        px = (
                            base[i, 0, y, xx]
                            + (dx - half)
                            + delta[i, (g * ksq + t) * 2 + 0, y, xx]
                        )
                        py = (
                            base[i, 1, y, xx]
                            + (dy - half)
                            + delta[i, (g * ksq + t) * 2 + 1, y, xx]
                        )
                        px = min(max(px, 0.0), w - 1.0)
                        py = min(max(py, 0.0), h - 1.0)
                        x0 = int(np.floor(px))
                        y0 = int(np.floor(py))
                        x1 = min(x0 + 1, w - 1)
                        y1 = min(y0 + 1, h - 1)
                        fx = px - x0
                        fy = py - y0
                        plane = taps[i, t * c + ch]
                        top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
                        bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
                        acc += mask[i, g * ksq + t, y, xx] * (
                            top * (1 - fy) + bot * fy
                        )
                    out[i, ch, y, xx] = acc
    return out


def test_conv2d_matches_loop_oracle_many_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 7))
        c_out = int(rng.integers(1, 7))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.integers(0, (k + 1) // 2 + 1))
        h = int(rng.integers(k, k + 7))
        w = int(rng.integers(k, k + 7))
        x = (0.4 * rng.standard_normal((n, c_in, h, w))).astype(np.float32)
        wgt = (0.4 * rng.standard_normal((c_out, c_in, k, k))).astype(np.float32)
        use_bias = bool(rng.integers(2))
        b = rng.standard_normal((1, c_out, 1, 1)).astype(np.float32) if use_bias else None
        got = T.conv2d(
            T.constant(x),
            T.constant(wgt),
            None if b is None else T.constant(b),
            stride=stride,
            padding=padding,
        ).numpy()
        want = naive_conv2d(x, wgt, b, stride, padding)
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst <= 1e-5, f"conv2d deviates from the loop oracle by {worst}"


def test_bilinear_sample_matches_loop_oracle_many_instances():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 5))
        h = int(rng.integers(2, 9))
        w = int(rng.integers(2, 9))
        ho = int(rng.integers(1, 7))
        wo = int(rng.integers(1, 7))
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        # coordinates deliberately overshoot the frame to hit the clamp
        coords = np.empty((n, 2, ho, wo), dtype=np.float32)
        coords[:, 0] = rng.uniform(-2.0, w + 1.0, (n, ho, wo))
        coords[:, 1] = rng.uniform(-2.0, h + 1.0, (n, ho, wo))
        got = T.bilinear_sample(T.constant(x), T.constant(coords)).numpy()
        want = naive_bilinear(x, coords)
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst <= 1e-5, f"bilinear_sample deviates from the loop oracle by {worst}"


def test_bilinear_sample_integer_grid_is_bit_exact():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 6, 7)).astype(np.float32)
    grid = T.base_grid(2, 6, 7, np.dtype(np.float32))
    out = T.bilinear_sample(T.constant(x), T.constant(np.ascontiguousarray(grid)))
    assert np.array_equal(out.numpy(), x)


def test_deform_gather_matches_loop_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(25):
        groups = int(rng.choice([1, 2, 4]))
        c = groups * int(rng.integers(1, 3))
        k = 3
        ksq = k * k
        n = int(rng.integers(1, 3))
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 7))
        taps = rng.standard_normal((n, ksq * c, h, w)).astype(np.float32)
        delta = rng.uniform(-2.5, 2.5, (n, 2 * ksq * groups, h, w)).astype(np.float32)
        mask = rng.uniform(0.0, 1.0, (n, ksq * groups, h, w)).astype(np.float32)
        base = np.ascontiguousarray(
            T.base_grid(n, h, w, np.dtype(np.float32))
            + rng.uniform(-1.5, 1.5, (n, 2, h, w)).astype(np.float32)
        )
        got = T.deform_gather(
            T.constant(taps), T.constant(delta), T.constant(mask), base, groups
        ).numpy()
        want = naive_deform_gather(taps, delta, mask, base, groups)
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst <= 1e-5, f"deform_gather deviates from the loop oracle by {worst}"


def test_pixel_shuffle_layout_and_inverse():
    rng = np.random.default_rng(4)
    n, c, h, w, r = 2, 3, 4, 5, 2
    x = rng.standard_normal((n, c * r * r, h, w)).astype(np.float32)
    out = T.pixel_shuffle(T.constant(x), r).numpy()
    assert out.shape == (n, c, h * r, w * r)
    for i in range(n):
        for co in range(c):
            for y in range(h * r):
                for xx in range(w * r):
                    src = x[i, co * r * r + (y % r) * r + (xx % r), y // r, xx // r]
                    assert out[i, co, y, xx] == src


def test_pointwise_ops_match_numpy_formulas():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    y = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    tx, ty = T.constant(x), T.constant(y)
    np.testing.assert_array_equal(T.add(tx, ty).numpy(), x + y)
    np.testing.assert_array_equal(T.sub(tx, ty).numpy(), x - y)
    np.testing.assert_array_equal(T.mul(tx, ty).numpy(), x * y)
    np.testing.assert_array_equal(T.mul_scalar(tx, 2.5).numpy(), x * np.float32(2.5))
    np.testing.assert_array_equal(T.add_scalar(tx, -1.25).numpy(), x + np.float32(-1.25))
    np.testing.assert_array_equal(T.relu(tx).numpy(), np.maximum(x, 0.0))
    np.testing.assert_allclose(
        T.leaky_relu(tx, 0.1).numpy(),
        np.where(x > 0, x, np.float32(0.1) * x),
        atol=1e-7,
    )
    np.testing.assert_allclose(T.sigmoid(tx).numpy(), 1.0 / (1.0 + np.exp(-x)), atol=1e-6)
    np.testing.assert_allclose(T.tanh(tx).numpy(), np.tanh(x), atol=1e-6)
    np.testing.assert_allclose(
        T.sqrt(T.constant(np.abs(x) + 1.0)).numpy(), np.sqrt(np.abs(x) + 1.0), atol=1e-6
    )
    assert T.mean_all(tx).item() == pytest.approx(float(x.mean()), abs=1e-6)


def test_add_bias_broadcasts_one_value_per_channel():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
    b = rng.standard_normal((1, 4, 1, 1)).astype(np.float32)
    np.testing.assert_array_equal(
        T.add_bias(T.constant(x), T.constant(b)).numpy(), x + b
    )


def test_concat_channels_permute_reshape_round_trips():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    b = rng.standard_normal((2, 2, 4, 5)).astype(np.float32)
    cat = T.concat([T.constant(a), T.constant(b)])
    np.testing.assert_array_equal(cat.numpy(), np.concatenate([a, b], axis=1))
    np.testing.assert_array_equal(T.channels(cat, 3, 5).numpy(), b)
    p = T.permute(T.constant(a), (0, 2, 3, 1))
    np.testing.assert_array_equal(p.numpy(), a.transpose(0, 2, 3, 1))
    r = T.reshape(T.constant(a), (2, 6, 2, 5))
    np.testing.assert_array_equal(r.numpy(), a.reshape(2, 6, 2, 5))


def test_upsample_bilinear_factor_one_is_identity():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 3, 5, 6)).astype(np.float32)
    np.testing.assert_array_equal(T.upsample_bilinear(T.constant(x), 1).numpy(), x)


def test_upsample_bilinear_constant_plane_stays_constant():
    x = np.full((1, 2, 4, 4), 0.37, dtype=np.float32)
    out = T.upsample_bilinear(T.constant(x), 4).numpy()
    assert out.shape == (1, 2, 16, 16)
    np.testing.assert_allclose(out, 0.37, atol=1e-7)


def test_ops_are_deterministic_bitwise():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 8, 12, 10)).astype(np.float32)
    w = rng.standard_normal((6, 8, 3, 3)).astype(np.float32)
    a = T.conv2d(T.constant(x), T.constant(w), padding=1).numpy()
    b = T.conv2d(T.constant(x), T.constant(w), padding=1).numpy()
    assert np.array_equal(a, b)


def test_mac_counter_formulas():
    rng = np.random.default_rng(10)
    x = T.constant(rng.standard_normal((2, 3, 8, 9)).astype(np.float32))
    w = T.constant(rng.standard_normal((5, 3, 3, 3)).astype(np.float32))
    with T.mac_counter() as mc:
        T.conv2d(x, w, padding=1)
    assert mc.by_category["conv"] == 2 * 5 * 3 * 9 * 8 * 9
    coords = T.constant(rng.uniform(0, 7, (2, 2, 4, 6)).astype(np.float32))
    with T.mac_counter() as mc:
        T.bilinear_sample(x, coords)
    assert mc.by_category["sample"] == 8 * 2 * 3 * 4 * 6


def test_rank_and_shape_contracts_raise():
    rng = np.random.default_rng(11)
    with pytest.raises(ContractViolation):
        T.constant(rng.standard_normal((3, 4, 5)).astype(np.float32))
    x = T.constant(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
    w = T.constant(rng.standard_normal((2, 5, 3, 3)).astype(np.float32))
    with pytest.raises(ContractViolation):
        T.conv2d(x, w)
    with pytest.raises(ContractViolation):
        T.add(x, T.constant(rng.standard_normal((1, 3, 4, 5)).astype(np.float32)))


def test_tensor_data_is_read_only():
    x = T.constant(np.zeros((1, 1, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        x.data[0, 0, 0, 0] = 1.0


def _with_numpy_fallback(monkeypatch):
    import codecsr.tensor as tensor_mod

    monkeypatch.setattr(tensor_mod, "_HAVE_NUMBA", False)


def test_numba_and_numpy_conv_paths_agree(monkeypatch):
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 6, 10, 11)).astype(np.float32)
    w = rng.standard_normal((4, 6, 3, 3)).astype(np.float32)
    fast = T.conv2d(T.constant(x), T.constant(w), padding=1, stride=2).numpy()
    _with_numpy_fallback(monkeypatch)
    slow = T.conv2d(T.constant(x), T.constant(w), padding=1, stride=2).numpy()
    assert np.abs(fast - slow).max() <= 1e-6


def test_numba_and_numpy_deform_paths_agree(monkeypatch):
    rng = np.random.default_rng(13)
    n, c, h, w, groups = 1, 8, 6, 7, 4
    ksq = 9
    taps = rng.standard_normal((n, ksq * c, h, w)).astype(np.float32)
    delta = rng.uniform(-1.5, 1.5, (n, 2 * ksq * groups, h, w)).astype(np.float32)
    mask = rng.uniform(0, 1, (n, ksq * groups, h, w)).astype(np.float32)
    base = np.ascontiguousarray(T.base_grid(n, h, w, np.dtype(np.float32)))

    def run():
        tt = T.tensor(taps, requires_grad=True)
        td = T.tensor(delta, requires_grad=True)
        tm = T.tensor(mask, requires_grad=True)
        with T.Tape() as tape:
            out = T.deform_gather(tt, td, tm, base, groups)
            loss = T.mean_all(T.mul(out, out))
        g = tape.gradients(loss)
        return out.numpy(), g[tt], g[td], g[tm]

    fast = run()
    _with_numpy_fallback(monkeypatch)
    slow = run()
    for a, b in zip(fast, slow):
        assert np.abs(a - b).max() <= 2e-6


def test_numba_and_numpy_leaky_relu_agree(monkeypatch):
    rng = np.random.default_rng(14)
    x = rng.standard_normal((2, 4, 9, 9)).astype(np.float32)

    def run():
        tx = T.tensor(x, requires_grad=True)
        with T.Tape() as tape:
            y = T.leaky_relu(tx, 0.1)
            loss = T.mean_all(y)
        return y.numpy(), tape.gradients(loss)[tx]

    fast = run()
    _with_numpy_fallback(monkeypatch)
    slow = run()
    assert np.array_equal(fast[0], slow[0])
    assert np.array_equal(fast[1], slow[1])
