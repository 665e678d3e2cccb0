"""Network configuration and parameter construction.

One recurrent enhancer, four stages:

  extract   stem conv (3 -> C) plus residual blocks shared by all frames
  mvgda     motion-vector-guided deformable alignment of both state streams
  rmgf      residual-map-gated fusion of aligned states with current features
  ftar      frame-type-adaptive reconstruction: a deep trunk for I-frames,
            a shallow one for P-frames, one shared upsampling head

Ablation variants drop parameters they do not use:

  full      everything
  onlymv    alignment is a plain motion-vector warp; no mvgda parameters
  onlydcn   full parameters; the dense motion field is forced to zero
  onlygl    full parameters; motion comes from a pyramidal intensity flow
  nogate    fusion gate pinned to one; no rmgf.fres parameters

Parameter names are stable and documented here; external weights files
index tensors by these names.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import require
from .params import ParamSet
from .tensor import Tensor

VARIANTS = ("full", "onlymv", "onlydcn", "onlygl", "nogate")


@dataclasses.dataclass(frozen=True)
class ReconConfig:
    channels: int = 64
    m_blocks: int = 24  # I-frame trunk depth
    n_blocks: int = 12  # P-frame trunk depth
    extract_blocks: int = 3
    scale: int = 4
    groups: int = 8
    kernel: int = 3
    offset_limit: float = 10.0
    variant: str = "full"

    def __post_init__(self):
        require(self.variant in VARIANTS, f"unknown variant {self.variant!r}")
        require(self.channels % self.groups == 0, "channels must divide by groups")
        require(self.channels % 4 == 0, "channels must divide by 4 for the head")
        require(self.scale == 4, "the reconstruction head is built for scale 4")
        require(self.kernel % 2 == 1, "kernel size must be odd")
        require(
            self.m_blocks >= 1 and self.n_blocks >= 1 and self.extract_blocks >= 1,
            "trunk depths must be positive",
        )

    def with_variant(self, variant: str) -> "ReconConfig":
        return dataclasses.replace(self, variant=variant)


PAPER_CONFIG = ReconConfig()
DESK_CONFIG = ReconConfig(channels=32, m_blocks=6, n_blocks=3)


def _conv_shapes(prefix: str, c_out: int, c_in: int, k: int):
    yield f"{prefix}.weight", (c_out, c_in, k, k)
    yield f"{prefix}.bias", (1, c_out, 1, 1)


def _block_shapes(prefix: str, count: int, c: int, k: int):
    for i in range(count):
        yield from _conv_shapes(f"{prefix}.rb{i}.conv1", c, c, k)
        yield from _conv_shapes(f"{prefix}.rb{i}.conv2", c, c, k)


def parameter_shapes(cfg: ReconConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and its dims for a configuration."""
    c, k = cfg.channels, cfg.kernel
    ksq = k * k
    shapes: dict[str, tuple[int, ...]] = {}

    def put(pairs):
        for name, dims in pairs:
            shapes[name] = dims

    put(_conv_shapes("extract.stem", c, 3, k))
    put(_block_shapes("extract", cfg.extract_blocks, c, k))
    if cfg.variant != "onlymv":
        put(_conv_shapes("mvgda.trunk.conv1", c, 3 * c, k))
        put(_conv_shapes("mvgda.trunk.conv2", c, c, k))
        put(_conv_shapes("mvgda.head_o", 2 * ksq * cfg.groups, c, k))
        put(_conv_shapes("mvgda.head_m", ksq * cfg.groups, c, k))
        put(_conv_shapes("mvgda.dcn_l", c, c, k))
        put(_conv_shapes("mvgda.dcn_h", c, c, k))
    if cfg.variant != "nogate":
        put(_conv_shapes("rmgf.fres.conv1", 16, 1, k))
        put(_conv_shapes("rmgf.fres.conv2", 1, 16, k))
    put(_conv_shapes("rmgf.fuse", c, 3 * c, k))
    put(_block_shapes("ftar.trunk_i", cfg.m_blocks, c, k))
    put(_block_shapes("ftar.trunk_p", cfg.n_blocks, c, k))
    put(_conv_shapes("ftar.head.conv1", 4 * (c // 2), c, k))
    put(_conv_shapes("ftar.head.conv2", 4 * (c // 4), c // 2, k))
    put(_conv_shapes("ftar.head.conv3", 3, c // 4, k))
    return shapes


# Parameters that start at zero: the offset/mask heads (alignment begins as
# a pure motion-vector warp with a neutral mask), the closing conv of every
# residual block (each block starts as identity), and the final head conv
# (the network output starts exactly at the bilinear upscale).
def _starts_at_zero(name: str) -> bool:
    return (
        name.startswith("mvgda.head_o.")
        or name.startswith("mvgda.head_m.")
        or name.startswith("ftar.head.conv3.")
        or (".conv2." in name and ".rb" in name)
        or name.endswith(".bias")
    )


def build_params(cfg: ReconConfig, seed: int = 0, dtype=np.float32) -> ParamSet:
    """Initialize parameters for a configuration.

    Weights draw from a fan-in-scaled normal (std = sqrt(2 / fan_in));
    biases and the zero-start set are zeros. Draws happen in lexicographic
    name order, so (cfg, seed) pins every value.
    """
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    shapes = parameter_shapes(cfg)
    out = ParamSet()
    for name in sorted(shapes):
        dims = shapes[name]
        if _starts_at_zero(name):
            arr = np.zeros(dims, dtype=dt)
        else:
            fan_in = int(np.prod(dims[1:]))
            arr = rng.standard_normal(dims) * np.sqrt(2.0 / fan_in)
            arr = arr.astype(dt)
        out.add(name, Tensor(arr, copy=False))
    return out


def warm_start(params: ParamSet, seed: int = 0, scale: float = 1.0) -> ParamSet:
    """Give the residual blocks' zero-started second convs real weights.

    A fresh build zeroes every block's second conv, which makes the whole
    network reproduce bilinear upsampling but also gates gradient flow:
    each block's first conv learns nothing until its second conv grows.
    That staging is harmless over long schedules and wasteful over short
    ones. This replacement opens those paths with fan-in-scaled draws
    while leaving the output projection at zero, so a warm-started network
    still starts exactly at the bilinear baseline.
    """
    rng = np.random.default_rng(seed)
    updates: dict[str, Tensor] = {}
    for name, value in params.items():
        if ".rb" in name and ".conv2.weight" in name:
            fan_in = int(np.prod(value.dims[1:]))
            arr = rng.standard_normal(value.dims) * (scale * np.sqrt(2.0 / fan_in))
            updates[name] = Tensor(arr.astype(value.data.dtype), copy=False)
    return params.replace(updates)


def config_from_params(params: ParamSet, variant: str | None = None) -> ReconConfig:
    """Recover the structural configuration from parameter names and dims.

    The variant cannot always be inferred (full/onlydcn/onlygl share one
    parameter set); pass it explicitly to override what presence implies.
    """
    require("extract.stem.weight" in params, "missing extraction stem")
    c = params["extract.stem.weight"].dims[0]
    k = params["extract.stem.weight"].dims[2]

    def depth(prefix: str) -> int:
        i = 0
        while f"{prefix}.rb{i}.conv1.weight" in params:
            i += 1
        return i

    has_align = "mvgda.trunk.conv1.weight" in params
    has_gate = "rmgf.fres.conv1.weight" in params
    if variant is None:
        if not has_align:
            variant = "onlymv"
        elif not has_gate:
            variant = "nogate"
        else:
            variant = "full"
    if has_align:
        groups = params["mvgda.head_m.weight"].dims[0] // (k * k)
    else:
        # onlymv has no alignment parameters, so groups is structural noise;
        # keep the default when it divides, otherwise the largest divisor
        groups = math.gcd(ReconConfig.groups, c)
    cfg = ReconConfig(
        channels=c,
        m_blocks=depth("ftar.trunk_i"),
        n_blocks=depth("ftar.trunk_p"),
        extract_blocks=depth("extract"),
        groups=groups,
        kernel=k,
        variant=variant,
    )
    expected = parameter_shapes(cfg)
    require(
        set(expected) == {n for n, _ in params.items()},
        "parameter names do not match the inferred configuration",
    )
    for name, value in params.items():
        require(
            value.dims == expected[name],
            f"parameter {name!r} has dims {value.dims}, expected {expected[name]}",
        )
    return cfg
