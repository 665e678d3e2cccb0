"""Rank-4 tensor engine with reverse-mode differentiation.

Everything the network touches is a Tensor: an immutable numpy array of
shape (N, C, H, W), stored row-major so element (n, c, y, x) lives at flat
index ((n * C + c) * H + y) * W + x. Two element types are supported,
float32 for production and float64 for verification runs; the active
default is controlled with `precision`.

Differentiation is taped. Ops executed inside a `Tape` block append nodes
in execution order; `Tape.gradients(loss)` walks the list once in reverse,
so no graph search happens and results are deterministic. Ops executed
with no tape open build nothing and keep inference allocation-light.

Multiply-accumulate work is metered: convolutions and bilinear gathers
report into every open `mac_counter` scope (8 MACs per sampled value,
out_c * in_c * k^2 per conv output value; elementwise work is not counted).
"""

from __future__ import annotations

import contextlib
import dataclasses
import math

import numpy as np

from ._kernels import (
    _HAVE_NUMBA,
    _col2im_jit,
    _deform_bwd_jit,
    _deform_fwd_jit,
    _im2col_jit,
    _lrelu_bwd_jit,
    _lrelu_fwd_jit,
    splat_grouped,
    splat_shared,
)
from .errors import ContractViolation, require

_FLOAT_DTYPES = {np.dtype(np.float32), np.dtype(np.float64)}
_DEFAULT_DTYPE = np.dtype(np.float32)

# Column-matrix budget for im2col; larger convolutions run in row chunks.
_COL_BYTES_LIMIT = 192 * 1024 * 1024
# Saved column matrices are kept for the backward pass only below this size.
_COL_SAVE_LIMIT = 48 * 1024 * 1024


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default element type ("float32"/"float64")."""
    global _DEFAULT_DTYPE
    new = np.dtype(dtype)
    require(new in _FLOAT_DTYPES, f"unsupported element type {new}")
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = new
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


# ---------------------------------------------------------------------------
# MAC metering


class MacCounter:
    """Accumulates multiply-accumulate counts by category."""

    def __init__(self):
        self.by_category: dict[str, int] = {}

    def add(self, category: str, count: int) -> None:
        self.by_category[category] = self.by_category.get(category, 0) + count

    @property
    def total(self) -> int:
        return sum(self.by_category.values())


_MAC_STACK: list[MacCounter] = []


@contextlib.contextmanager
def mac_counter():
    """Open a metering scope; nested scopes each see the same additions."""
    counter = MacCounter()
    _MAC_STACK.append(counter)
    try:
        yield counter
    finally:
        _MAC_STACK.pop()


def _add_macs(category: str, count: int) -> None:
    for counter in _MAC_STACK:
        counter.add(category, count)


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    """Immutable rank-4 array. Do not mutate `.data`; it is write-locked."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, copy: bool = True):
        arr = np.array(data, copy=copy) if copy else np.asarray(data)
        require(arr.ndim == 4, f"tensors are rank 4, got rank {arr.ndim}")
        require(
            arr.dtype in _FLOAT_DTYPES,
            f"tensors hold float32 or float64 elements, got {arr.dtype}",
        )
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def item(self) -> float:
        require(self.data.size == 1, "item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, copy=False)

    def astype(self, dtype) -> "Tensor":
        """Cast to another element type; the result is a fresh leaf."""
        return Tensor(self.data.astype(np.dtype(dtype)), copy=False)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalar operands mean python numbers, not tensors.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        require(not isinstance(other, Tensor), "tensor division is by scalars only")
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)


@dataclasses.dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: object  # callable(grad_out, need) -> tuple of arrays/None


class Grads:
    """Gradient lookup keyed by tensor identity.

    Tensors the loss does not reach map to zeros of their own shape.
    """

    def __init__(self, values: dict[int, np.ndarray], holders: dict[int, Tensor]):
        self._values = values
        self._holders = holders

    def get(self, t: Tensor) -> np.ndarray:
        g = self._values.get(id(t))
        if g is None:
            return np.zeros(t.dims, dtype=t.dtype)
        return g

    __getitem__ = get

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._values


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records op nodes in execution order for one backward sweep."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        require(_TAPE_STACK and _TAPE_STACK[-1] is self, "tape stack corrupted")
        _TAPE_STACK.pop()
        return False

    def gradients(self, loss: Tensor) -> Grads:
        """Reverse sweep from a scalar loss over the recorded nodes."""
        require(loss.dims == (1, 1, 1, 1), "gradients need a scalar (1,1,1,1) loss")
        values: dict[int, np.ndarray] = {
            id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)
        }
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = values.get(id(node.out))
            if g is None:
                continue
            need = tuple(p.requires_grad for p in node.parents)
            parent_grads = node.backward(g, need)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                key = id(parent)
                if key in values:
                    values[key] = values[key] + pg
                else:
                    values[key] = pg
                    holders[key] = parent
        return Grads(values, holders)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _wrap(arr: np.ndarray) -> Tensor:
    return Tensor(arr, copy=False)


def _record(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, backward))
    return out


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        require(t.dtype == dt, f"mixed element types {dt} and {t.dtype}")
    return dt


# ---------------------------------------------------------------------------
# Construction helpers


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Copy `data` into a tensor using the default element type."""
    dt = np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(data).astype(dt), requires_grad=requires_grad, copy=False)


def constant(arr: np.ndarray) -> Tensor:
    """Wrap an array without copying; the caller must not mutate it after."""
    return Tensor(arr, requires_grad=False, copy=False)


def zeros(dims, dtype=None, requires_grad: bool = False) -> Tensor:
    dt = np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE
    return Tensor(np.zeros(dims, dtype=dt), requires_grad=requires_grad, copy=False)


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    require(a.dims == b.dims, f"add needs matching dims, got {a.dims} vs {b.dims}")
    _same_dtype(a, b)
    out = _wrap(a.data + b.data)

    def backward(g, need):
        return (g if need[0] else None, g if need[1] else None)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    require(a.dims == b.dims, f"sub needs matching dims, got {a.dims} vs {b.dims}")
    _same_dtype(a, b)
    out = _wrap(a.data - b.data)

    def backward(g, need):
        return (g if need[0] else None, -g if need[1] else None)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; one operand may have a single broadcast channel."""
    _same_dtype(a, b)
    an, ac, ah, aw = a.dims
    bn, bc, bh, bw = b.dims
    require(
        (an, ah, aw) == (bn, bh, bw) and (ac == bc or ac == 1 or bc == 1),
        f"mul dims {a.dims} and {b.dims} are not compatible",
    )
    out = _wrap(a.data * b.data)

    def backward(g, need):
        ga = gb = None
        if need[0]:
            ga = g * b.data
            if ac == 1 and bc != 1:
                ga = ga.sum(axis=1, keepdims=True)
        if need[1]:
            gb = g * a.data
            if bc == 1 and ac != 1:
                gb = gb.sum(axis=1, keepdims=True)
        return (ga, gb)

    return _record(out, (a, b), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = _wrap(a.data + a.dtype.type(s))

    def backward(g, need):
        return (g,)

    return _record(out, (a,), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    scale = a.dtype.type(s)
    out = _wrap(a.data * scale)

    def backward(g, need):
        return (g * scale,)

    return _record(out, (a,), backward)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias of dims (1, C, 1, 1) to every position."""
    _same_dtype(a, b)
    require(
        b.dims == (1, a.dims[1], 1, 1),
        f"bias dims {b.dims} do not fit tensor {a.dims}",
    )
    out = _wrap(a.data + b.data)

    def backward(g, need):
        gb = None
        if need[1]:
            gb = g.sum(axis=(0, 2, 3)).reshape(b.dims)
        return (g if need[0] else None, gb)

    return _record(out, (a, b), backward)


def sqrt(a: Tensor) -> Tensor:
    val = np.sqrt(a.data)
    out = _wrap(val)

    def backward(g, need):
        return (g * (0.5 / val),)

    return _record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = _wrap(np.maximum(a.data, 0))

    def backward(g, need):
        return (np.where(a.data > 0, g, 0),)

    return _record(out, (a,), backward)


def leaky_relu(a: Tensor, negative_slope: float = 0.1) -> Tensor:
    slope = a.dtype.type(negative_slope)
    if _HAVE_NUMBA:
        val = np.empty_like(a.data)
        _lrelu_fwd_jit(a.data.reshape(-1), val.reshape(-1), slope)
    else:
        val = np.where(a.data > 0, a.data, a.data * slope)
    out = _wrap(val)

    def backward(g, need):
        if _HAVE_NUMBA:
            gx = np.empty_like(a.data)
            _lrelu_bwd_jit(
                a.data.reshape(-1),
                np.ascontiguousarray(g).reshape(-1),
                gx.reshape(-1),
                slope,
            )
            return (gx,)
        return (np.where(a.data > 0, g, g * slope),)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    val = np.empty_like(x)
    pos = x >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    val[~pos] = ex / (1.0 + ex)
    out = _wrap(val)

    def backward(g, need):
        return (g * val * (1.0 - val),)

    return _record(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    val = np.tanh(a.data)
    out = _wrap(val)

    def backward(g, need):
        return (g * (1.0 - val * val),)

    return _record(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    """Mean over every element, returned as a (1,1,1,1) scalar tensor."""
    out = _wrap(a.data.mean(dtype=a.dtype).reshape(1, 1, 1, 1))
    inv = a.dtype.type(1.0 / a.data.size)

    def backward(g, need):
        return (np.full(a.dims, g.reshape(()) * inv, dtype=a.dtype),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# Shape ops


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    require(len(parts) >= 1, "concat needs at least one tensor")
    _same_dtype(*parts)
    n, _, h, w = parts[0].dims
    for p in parts[1:]:
        require(
            (p.dims[0], p.dims[2], p.dims[3]) == (n, h, w),
            "concat parts must agree outside the channel axis",
        )
    out = _wrap(np.concatenate([p.data for p in parts], axis=1))
    splits = [p.dims[1] for p in parts]

    def backward(g, need):
        grads = []
        start = 0
        for width, wanted in zip(splits, need):
            grads.append(g[:, start : start + width] if wanted else None)
            start += width
        return tuple(grads)

    return _record(out, tuple(parts), backward)


def channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice a channel range [start, stop)."""
    require(0 <= start < stop <= a.dims[1], f"bad channel slice [{start}, {stop})")
    out = _wrap(np.ascontiguousarray(a.data[:, start:stop]))

    def backward(g, need):
        full = np.zeros(a.dims, dtype=a.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (a,), backward)


def permute(a: Tensor, axes: tuple[int, int, int, int]) -> Tensor:
    out = _wrap(np.ascontiguousarray(np.transpose(a.data, axes)))
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(4))

    def backward(g, need):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _record(out, (a,), backward)


def reshape(a: Tensor, dims: tuple[int, int, int, int]) -> Tensor:
    require(int(np.prod(dims)) == a.data.size, f"cannot reshape {a.dims} to {dims}")
    out = _wrap(a.data.reshape(dims))

    def backward(g, need):
        return (g.reshape(a.dims),)

    return _record(out, (a,), backward)


def pixel_shuffle(a: Tensor, factor: int) -> Tensor:
    """Rearrange (N, r^2*C, H, W) to (N, C, r*H, r*W).

    Input channel c*r^2 + dy*r + dx supplies output channel c at subpixel
    position (dy, dx); the inverse rearrangement is exact.
    """
    n, c_in, h, w = a.dims
    r = int(factor)
    require(r >= 1 and c_in % (r * r) == 0, f"channels {c_in} not divisible by {r}^2")
    c_out = c_in // (r * r)
    val = (
        a.data.reshape(n, c_out, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c_out, h * r, w * r)
    )
    out = _wrap(np.ascontiguousarray(val))

    def backward(g, need):
        gi = (
            g.reshape(n, c_out, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c_in, h, w)
        )
        return (np.ascontiguousarray(gi),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# Convolution


def _lower_taps(
    xp: np.ndarray, k: int, stride: int, row0: int, row1: int, wo: int
) -> np.ndarray:
    """Stack the k*k shifted views of a padded input as a GEMM operand.

    Returns (k*k*C, N*rows*Wo) for output rows [row0, row1): row (t, c)
    holds input channel c shifted by tap t = ky*k + kx. Copying whole
    shifted slabs keeps the inner runs row-contiguous, which is much
    cheaper than gathering k*k-wide patches per output position.
    """
    n, c = xp.shape[:2]
    rows = row1 - row0
    cols = np.empty((k * k, c, n, rows, wo), dtype=xp.dtype)
    if _HAVE_NUMBA:
        _im2col_jit(xp[:, :, row0 * stride :, :], cols, k, stride)
    else:
        for t in range(k * k):
            ky, kx = divmod(t, k)
            y0 = row0 * stride + ky
            sl = xp[
                :,
                :,
                y0 : y0 + (rows - 1) * stride + 1 : stride,
                kx : kx + (wo - 1) * stride + 1 : stride,
            ]
            cols[t] = sl.transpose(1, 0, 2, 3)
    return cols.reshape(k * k * c, n * rows * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    weight has dims (C_out, C_in, k, k); bias, when given, (1, C_out, 1, 1).
    Output height is floor((H + 2*padding - k) / stride) + 1, same for
    width. Counts C_out*C_in*k^2 MACs per output position.
    """
    dt = _same_dtype(x, weight) if bias is None else _same_dtype(x, weight, bias)
    n, c_in, h, w = x.dims
    c_out, wc_in, kh, kw = weight.dims
    require(kh == kw, f"square kernels only, got {kh}x{kw}")
    require(wc_in == c_in, f"weight expects {wc_in} input channels, tensor has {c_in}")
    require(stride >= 1 and padding >= 0, "bad stride/padding")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    require(ho >= 1 and wo >= 1, "conv output would be empty")
    if bias is not None:
        require(bias.dims == (1, c_out, 1, 1), f"bias dims {bias.dims} do not fit")

    if padding:
        xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=dt)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    # Weight rows reordered to the (tap, channel) layout of _lower_taps.
    w_row = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(
        c_out, k * k * c_in
    )

    bytes_per_row = c_in * k * k * dt.itemsize * n * wo
    chunk = max(1, min(ho, _COL_BYTES_LIMIT // max(1, bytes_per_row)))
    out_pre = np.empty((c_out, n, ho, wo), dtype=dt)
    saved_cols = None
    keep_cols = (
        _active_tape() is not None
        and weight.requires_grad
        and ho * bytes_per_row <= _COL_SAVE_LIMIT
    )
    if keep_cols and chunk >= ho:
        saved_cols = _lower_taps(xp, k, stride, 0, ho, wo)
        out_pre[:] = (w_row @ saved_cols).reshape(c_out, n, ho, wo)
    else:
        for r0 in range(0, ho, chunk):
            r1 = min(ho, r0 + chunk)
            cols = _lower_taps(xp, k, stride, r0, r1, wo)
            out_pre[:, :, r0:r1] = (w_row @ cols).reshape(c_out, n, r1 - r0, wo)
    out_arr = np.ascontiguousarray(out_pre.transpose(1, 0, 2, 3))
    if bias is not None:
        out_arr += bias.data
    _add_macs("conv", n * c_out * c_in * k * k * ho * wo)
    out = _wrap(out_arr)

    def backward(g, need):
        g_bias = None
        if bias is not None and need[2]:
            g_bias = g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)
        # (N, C_out, Ho, Wo) -> (C_out, N*Ho*Wo), matching the cols columns.
        g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        g_weight = None
        if need[1]:
            if saved_cols is not None:
                gw = g_mat @ saved_cols.T
            else:
                gw = np.zeros((c_out, k * k * c_in), dtype=dt)
                gm4 = g_mat.reshape(c_out, n, ho, wo)
                for r0 in range(0, ho, chunk):
                    r1 = min(ho, r0 + chunk)
                    cols = _lower_taps(xp, k, stride, r0, r1, wo)
                    gw += gm4[:, :, r0:r1].reshape(c_out, -1) @ cols.T
            g_weight = np.ascontiguousarray(
                gw.reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
            )
        g_x = None
        if need[0]:
            gxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=dt)
            gcols = (w_row.T @ g_mat).reshape(k * k, c_in, n, ho, wo)
            if _HAVE_NUMBA:
                _col2im_jit(gcols, gxp, k, stride)
            else:
                for t in range(k * k):
                    ky, kx = divmod(t, k)
                    gxp[
                        :,
                        :,
                        ky : ky + (ho - 1) * stride + 1 : stride,
                        kx : kx + (wo - 1) * stride + 1 : stride,
                    ] += gcols[t].transpose(1, 0, 2, 3)
            g_x = (
                gxp[:, :, padding : padding + h, padding : padding + w]
                if padding
                else gxp
            )
            if padding:
                g_x = np.ascontiguousarray(g_x)
        if bias is not None:
            return (g_x, g_weight, g_bias)
        return (g_x, g_weight)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward)


# ---------------------------------------------------------------------------
# Sampling ops


def _corner_data(coords: np.ndarray, h: int, w: int):
    """Clamped corner indices and fractional weights for bilinear lookup.

    coords is (..., 2, P) with channel 0 = x, channel 1 = y. Returns values
    with the leading dims of coords minus the axis of size 2.
    """
    xc = np.clip(coords[..., 0, :], 0, w - 1)
    yc = np.clip(coords[..., 1, :], 0, h - 1)
    x0 = np.floor(xc)
    y0 = np.floor(yc)
    wx = xc - x0
    wy = yc - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, y0, x1, y1, wx, wy


def _inside(coords: np.ndarray, h: int, w: int):
    """1 where the unclamped coordinate is inside the grid, else 0."""
    gx = ((coords[..., 0, :] >= 0) & (coords[..., 0, :] <= w - 1)).astype(
        coords.dtype
    )
    gy = ((coords[..., 1, :] >= 0) & (coords[..., 1, :] <= h - 1)).astype(
        coords.dtype
    )
    return gx, gy


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample every channel of x at per-pixel positions.

    coords has dims (N, 2, Ho, Wo); channel 0 holds x (column) positions
    and channel 1 holds y (row) positions, in input pixel units. Positions
    are clamped to the border, so sampling at integer grid points inside
    the image reproduces input values exactly. Counts 8 MACs per sampled
    value.
    """
    dt = _same_dtype(x, coords)
    n, c, h, w = x.dims
    cn, two, ho, wo = coords.dims
    require(cn == n and two == 2, f"coords dims {coords.dims} do not fit input {x.dims}")
    p = ho * wo
    cflat = coords.data.reshape(n, 2, p)
    x0, y0, x1, y1, wx, wy = _corner_data(cflat, h, w)
    out_arr = np.empty((n, c, p), dtype=dt)
    flat = x.data.reshape(n, c, h * w)
    for i in range(n):
        j00 = y0[i] * w + x0[i]
        j01 = y0[i] * w + x1[i]
        j10 = y1[i] * w + x0[i]
        j11 = y1[i] * w + x1[i]
        v00 = flat[i][:, j00]
        v01 = flat[i][:, j01]
        v10 = flat[i][:, j10]
        v11 = flat[i][:, j11]
        top = v00 + wx[i] * (v01 - v00)
        bot = v10 + wx[i] * (v11 - v10)
        out_arr[i] = top + wy[i] * (bot - top)
    _add_macs("sample", 8 * n * c * p)
    out = _wrap(out_arr.reshape(n, c, ho, wo))

    def backward(g, need):
        gflat = g.reshape(n, c, p)
        g_x = None
        g_coords = None
        if need[0]:
            g_x = np.zeros((n, c, h * w), dtype=dt)
            for i in range(n):
                splat_shared(
                    np.ascontiguousarray(gflat[i]),
                    y0[i],
                    x0[i],
                    wy[i].astype(dt, copy=False),
                    wx[i].astype(dt, copy=False),
                    g_x[i],
                    w,
                )
            g_x = g_x.reshape(x.dims)
        if need[1]:
            gx_pos = np.empty((n, p), dtype=dt)
            gy_pos = np.empty((n, p), dtype=dt)
            for i in range(n):
                j00 = y0[i] * w + x0[i]
                j01 = y0[i] * w + x1[i]
                j10 = y1[i] * w + x0[i]
                j11 = y1[i] * w + x1[i]
                v00 = flat[i][:, j00]
                v01 = flat[i][:, j01]
                v10 = flat[i][:, j10]
                v11 = flat[i][:, j11]
                dx = (1 - wy[i]) * (v01 - v00) + wy[i] * (v11 - v10)
                dy = (1 - wx[i]) * (v10 - v00) + wx[i] * (v11 - v01)
                gx_pos[i] = (gflat[i] * dx).sum(axis=0)
                gy_pos[i] = (gflat[i] * dy).sum(axis=0)
            in_x, in_y = _inside(cflat, h, w)
            g_coords = np.stack([gx_pos * in_x, gy_pos * in_y], axis=1).reshape(
                coords.dims
            )
        return (g_x, g_coords)

    return _record(out, (x, coords), backward)


_GRID_CACHE: dict[tuple, np.ndarray] = {}


def _upsample_coords(h: int, w: int, factor: int, dtype: np.dtype) -> np.ndarray:
    key = (h, w, factor, dtype.str)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        ho, wo = h * factor, w * factor
        ys = ((np.arange(ho, dtype=dtype) + dtype.type(0.5)) / factor) - dtype.type(0.5)
        xs = ((np.arange(wo, dtype=dtype) + dtype.type(0.5)) / factor) - dtype.type(0.5)
        grid = np.empty((1, 2, ho, wo), dtype=dtype)
        grid[0, 0] = xs[None, :]
        grid[0, 1] = ys[:, None]
        grid.setflags(write=False)
        _GRID_CACHE[key] = grid
    return grid


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Scale H and W by an integer factor with half-pixel-centre sampling."""
    require(factor >= 1, "factor must be at least 1")
    n, _, h, w = x.dims
    grid = _upsample_coords(h, w, factor, x.dtype)
    coords = constant(np.broadcast_to(grid, (n, 2, h * factor, w * factor)))
    return bilinear_sample(x, coords)


def base_grid(n: int, h: int, w: int, dtype=None) -> np.ndarray:
    """Identity sampling positions (x, y) of dims (N, 2, H, W), read-only."""
    dt = np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE
    key = ("base", h, w, dt.str)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = np.empty((1, 2, h, w), dtype=dt)
        grid[0, 0] = np.arange(w, dtype=dt)[None, :]
        grid[0, 1] = np.arange(h, dtype=dt)[:, None]
        grid.setflags(write=False)
        _GRID_CACHE[key] = grid
    return np.broadcast_to(grid, (n, 2, h, w))


def deform_gather(
    taps: Tensor,
    delta: Tensor,
    mask: Tensor,
    base_positions: np.ndarray,
    groups: int,
) -> Tensor:
    """Masked multi-tap gather: the sampling half of a deformable conv.

    taps holds K^2 stacked feature planes of C channels each, laid out as
    channel t*C + c for tap t (tap order row-major over (dy, dx)). Each of
    the `groups` offset groups owns K^2 taps; output channel c belongs to
    group g(c) = c * groups // C. For tap t = ky*K + kx at pixel p:

        position = base_positions(p) + (kx - K//2, ky - K//2)
                   + delta[(g*K^2 + t)*2 + {0: x, 1: y}](p)
        out[c](p) = sum_t mask[g(c)*K^2 + t](p) * sample(taps[t*C + c], position)

    base_positions is a plain (N, 2, H, W) array (x then y), typically the
    identity grid plus a dense motion field; no gradient flows into it.
    Sampling uses the same clamped bilinear rule as `bilinear_sample`.
    """
    dt = _same_dtype(taps, delta, mask)
    n, tc, h, w = taps.dims
    g_count = int(groups)
    require(mask.dims[0] == n and delta.dims[0] == n, "batch size mismatch")
    require(mask.dims[1] % g_count == 0, "mask channels not divisible by groups")
    ksq = mask.dims[1] // g_count
    k = math.isqrt(ksq)
    require(k * k == ksq and k % 2 == 1, f"taps per group must be an odd square, got {ksq}")
    require(tc % ksq == 0, "tap channels not divisible by K^2")
    c = tc // ksq
    require(c % g_count == 0, f"channels {c} not divisible by groups {g_count}")
    cg = c // g_count
    require(delta.dims == (n, 2 * ksq * g_count, h, w), f"delta dims {delta.dims} do not fit")
    require(mask.dims == (n, ksq * g_count, h, w), f"mask dims {mask.dims} do not fit")
    require(base_positions.shape == (n, 2, h, w), "base_positions shape mismatch")

    p = h * w
    half = k // 2
    # Tap displacements laid out to broadcast against (N, G, K^2, 2, P).
    disp = np.empty((ksq, 2), dtype=dt)
    disp[:, 0] = np.tile(np.arange(k) - half, k)  # dx, fastest over kx
    disp[:, 1] = np.repeat(np.arange(k) - half, k)  # dy
    base = np.swapaxes(base_positions.reshape(n, 2, p), 1, 2).astype(dt, copy=False)
    # coords (N, G, K^2, 2, P): absolute sampling positions per group/tap.
    coords = (
        base[:, None, None, :, :].transpose(0, 1, 2, 4, 3)
        + disp[None, None, :, :, None]
        + delta.data.reshape(n, g_count, ksq, 2, p)
    )
    mask3 = mask.data.reshape(n, g_count, ksq, p)
    taps2 = taps.data.reshape(n, tc, p)
    tape_active = _active_tape() is not None and (
        taps.requires_grad or delta.requires_grad or mask.requires_grad
    )

    sampled_all = None
    if _HAVE_NUMBA:
        out_arr = np.zeros((n, c, p), dtype=dt)
        for i in range(n):
            _deform_fwd_jit(taps2[i], coords[i], mask3[i], out_arr[i], h, w)
    else:
        out_arr, sampled_all = _deform_forward_numpy(
            taps2, coords, mask3, h, w, c, g_count, save=tape_active
        )
    _add_macs("sample", 8 * n * c * ksq * p)
    out = _wrap(out_arr.reshape(n, c, h, w))

    def backward(g, need):
        gout = g.reshape(n, c, p)
        g_taps = np.zeros((n, tc, p), dtype=dt) if need[0] else None
        g_delta = np.empty((n, g_count, ksq, 2, p), dtype=dt) if need[1] else None
        g_mask = np.empty((n, g_count, ksq, p), dtype=dt) if need[2] else None
        if _HAVE_NUMBA:
            dummy_t = np.zeros((1, 1), dtype=dt)
            dummy_d = np.zeros((1, 1, 2, 1), dtype=dt)
            dummy_m = np.zeros((1, 1, 1), dtype=dt)
            for i in range(n):
                _deform_bwd_jit(
                    taps2[i],
                    coords[i],
                    mask3[i],
                    gout[i],
                    g_taps[i] if need[0] else dummy_t,
                    g_delta[i] if need[1] else dummy_d,
                    g_mask[i] if need[2] else dummy_m,
                    h,
                    w,
                    need[0],
                    need[1],
                    need[2],
                )
        else:
            _deform_backward_numpy(
                taps2,
                coords,
                mask3,
                gout,
                sampled_all,
                g_taps,
                g_delta,
                g_mask,
                h,
                w,
                c,
                g_count,
                need,
            )
        return (
            g_taps.reshape(taps.dims) if need[0] else None,
            g_delta.reshape(delta.dims) if need[1] else None,
            g_mask.reshape(mask.dims) if need[2] else None,
        )

    return _record(out, (taps, delta, mask), backward)


def _deform_forward_numpy(taps2, coords, mask3, h, w, c, g_count, save):
    """Vectorised fallback for the fused deformable-gather kernel.

    Gathers the four corner values for every (channel, tap, pixel) with
    fancy indexing in pixel blocks. Returns the output and, when save is
    set, the per-tap samples needed by the mask gradient.
    """
    dt = taps2.dtype
    n, tc, p = taps2.shape
    ksq = tc // c
    cg = c // g_count
    x0, y0, x1, y1, wx, wy = _corner_data(coords, h, w)  # each (N, G, K^2, P)
    # Row offset into the flat tap stack for (channel c, tap t): t*C + c.
    row = (np.arange(ksq)[None, :, None] * c + np.arange(c)[:, None, None]) * p
    grp = np.arange(c) * g_count // c  # offset group of each channel
    block = max(1024, 4_000_000 // (c * ksq))
    out_arr = np.empty((n, c, p), dtype=dt)
    sampled_all = [None] * n if save else None
    for i in range(n):
        fv = taps2[i].reshape(-1)
        dest = np.empty((c, ksq, p), dtype=dt) if save else None
        for lo in range(0, p, block):
            hi = min(p, lo + block)
            jx0, jy0 = x0[i][grp][:, :, lo:hi], y0[i][grp][:, :, lo:hi]
            jx1, jy1 = x1[i][grp][:, :, lo:hi], y1[i][grp][:, :, lo:hi]
            v00 = fv[row + jy0 * w + jx0]
            v01 = fv[row + jy0 * w + jx1]
            v10 = fv[row + jy1 * w + jx0]
            v11 = fv[row + jy1 * w + jx1]
            fx = wx[i][grp][:, :, lo:hi]
            fy = wy[i][grp][:, :, lo:hi]
            top = v00 + fx * (v01 - v00)
            bot = v10 + fx * (v11 - v10)
            sampled = top + fy * (bot - top)  # (C, K^2, block)
            if save:
                dest[:, :, lo:hi] = sampled
            weighted = sampled.reshape(g_count, cg, ksq, hi - lo) * mask3[i][
                :, None, :, lo:hi
            ]
            out_arr[i, :, lo:hi] = weighted.sum(axis=2).reshape(c, hi - lo)
        if save:
            sampled_all[i] = dest
    return out_arr, sampled_all


def _deform_backward_numpy(
    taps2, coords, mask3, gout, sampled_all, g_taps, g_delta, g_mask, h, w, c,
    g_count, need,
):
    """Vectorised adjoint matching _deform_forward_numpy (save must be on)."""
    n, tc, p = taps2.shape
    ksq = tc // c
    cg = c // g_count
    x0, y0, x1, y1, wx, wy = _corner_data(coords, h, w)
    row = (np.arange(ksq)[None, :, None] * c + np.arange(c)[:, None, None]) * p
    grp = np.arange(c) * g_count // c
    if need[1]:
        in_x, in_y = _inside(coords, h, w)
    rows_for_splat = None
    if need[0]:
        # Grouped-splat row layout: slice (g, t) owns channel rows
        # t*C + g*cg ... t*C + (g+1)*cg - 1, which share one offset field.
        rows_for_splat = (
            np.arange(ksq)[None, :, None] * c
            + np.arange(g_count)[:, None, None] * cg
            + np.arange(cg)[None, None, :]
        ).reshape(g_count * ksq, cg)
    for i in range(n):
        g_per_channel = gout[i].reshape(g_count, cg, 1, p)
        weighted_g = g_per_channel * mask3[i][:, None]  # (G, cg, K^2, P)
        if need[2]:
            g_mask[i] = (
                g_per_channel * sampled_all[i].reshape(g_count, cg, ksq, p)
            ).sum(axis=1)
        if need[0]:
            vals = np.ascontiguousarray(
                weighted_g.transpose(0, 2, 1, 3).reshape(g_count * ksq, cg, p)
            )
            splat_grouped(
                vals,
                rows_for_splat,
                y0[i].reshape(g_count * ksq, p),
                x0[i].reshape(g_count * ksq, p),
                np.ascontiguousarray(wy[i].reshape(g_count * ksq, p)),
                np.ascontiguousarray(wx[i].reshape(g_count * ksq, p)),
                g_taps[i].reshape(tc, p),
                w,
            )
        if need[1]:
            fv = taps2[i].reshape(-1)
            jx0, jy0 = x0[i][grp], y0[i][grp]
            jx1, jy1 = x1[i][grp], y1[i][grp]
            v00 = fv[row + jy0 * w + jx0]
            v01 = fv[row + jy0 * w + jx1]
            v10 = fv[row + jy1 * w + jx0]
            v11 = fv[row + jy1 * w + jx1]
            fx = wx[i][grp]
            fy = wy[i][grp]
            dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            g_delta[i, :, :, 0] = (
                weighted_g * dx.reshape(g_count, cg, ksq, p)
            ).sum(axis=1) * in_x[i]
            g_delta[i, :, :, 1] = (
                weighted_g * dy.reshape(g_count, cg, ksq, p)
            ).sum(axis=1) * in_y[i]


# ---------------------------------------------------------------------------
# Gradient verification


@dataclasses.dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_err: float
    worst_index: int


@dataclasses.dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol


def grad_check(
    fn,
    inputs: dict[str, Tensor],
    tol: float = 1e-4,
    step: float = 1e-6,
    samples_per_input: int = 24,
    seed: int = 0,
) -> GradCheckReport:
    """Compare taped gradients of fn(inputs) with central differences.

    fn must be a pure function of the named tensors returning a scalar
    tensor. All inputs must be float64 leaves with requires_grad set; the
    relative error uses max(|analytic|, |numeric|, 1e-3) as denominator.
    """
    for name, t in inputs.items():
        require(t.dtype == np.float64, f"grad_check input {name!r} must be float64")
        require(t.requires_grad, f"grad_check input {name!r} must require grad")
    with Tape() as tape:
        loss = fn(dict(inputs))
    analytic = tape.gradients(loss)
    rng = np.random.default_rng(seed)
    entries = []
    for name, t in inputs.items():
        a = analytic[t]
        size = t.data.size
        if size <= samples_per_input:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=samples_per_input, replace=False)
        worst = 0.0
        worst_idx = -1
        for flat in coords:
            flat = int(flat)
            probe = {}
            for other_name, other in inputs.items():
                if other_name == name:
                    arr = other.data.copy()
                    arr.flat[flat] += step
                    probe[other_name] = Tensor(arr, requires_grad=True, copy=False)
                else:
                    probe[other_name] = other
            plus = fn(probe).item()
            arr = t.data.copy()
            arr.flat[flat] -= step
            probe[name] = Tensor(arr, requires_grad=True, copy=False)
            minus = fn(probe).item()
            numeric = (plus - minus) / (2.0 * step)
            ref = a.flat[flat]
            rel = abs(ref - numeric) / max(abs(ref), abs(numeric), 1e-3)
            if not math.isfinite(rel):
                rel = math.inf
            if rel > worst:
                worst = rel
                worst_idx = flat
        entries.append(GradCheckEntry(name, len(coords), worst, worst_idx))
    return GradCheckReport(tol=tol, entries=entries)
