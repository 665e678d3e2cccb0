"""Synthetic clip generation and clip handling.

Clips are short high-resolution sequences with known global motion:
layered random textures with sharp structure, translated or rotated with
subpixel steps. They exist so training and evaluation can run
self-contained and deterministically; nothing about the model is tuned to
them beyond their motion magnitudes.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np
from scipy import ndimage

from .codec import (
    Frame,
    PriorStream,
    bicubic_downsample,
    encode_lr,
    load_frame_dir,
)
from .errors import ParseError, require


@dataclasses.dataclass
class Clip:
    """One sequence: ground-truth frames plus what the codec made of them."""

    hr: list[Frame]
    lr_source: list[Frame]
    decoded: list[Frame] | None = None
    priors: PriorStream | None = None

    def __len__(self) -> int:
        return len(self.hr)


def _texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Layered texture: band-limited noise plus hard-edged shapes."""
    out = np.zeros((height, width, 3), dtype=np.float32)
    for sigma, gain in ((13.0, 0.6), (5.0, 0.3), (1.5, 0.15)):
        noise = rng.standard_normal((height, width, 3)).astype(np.float32)
        for c in range(3):
            noise[:, :, c] = ndimage.gaussian_filter(noise[:, :, c], sigma, mode="wrap")
        scale = np.abs(noise).max() + 1e-6
        out += gain * noise / scale
    ys, xs = np.mgrid[0:height, 0:width]
    for _ in range(10):
        color = rng.random(3).astype(np.float32) * 1.6 - 0.8
        kind = rng.integers(3)
        if kind == 0:  # rectangle
            y0, x0 = rng.integers(height), rng.integers(width)
            hh, ww = rng.integers(height // 8, height // 3), rng.integers(width // 8, width // 3)
            m = (ys >= y0) & (ys < y0 + hh) & (xs >= x0) & (xs < x0 + ww)
        elif kind == 1:  # disc
            cy, cx = rng.integers(height), rng.integers(width)
            r = rng.integers(min(height, width) // 12, min(height, width) // 5)
            m = (ys - cy) ** 2 + (xs - cx) ** 2 < r * r
        else:  # stripe
            angle = rng.uniform(0, np.pi)
            period = rng.integers(12, 40)
            phase = (np.cos(angle) * xs + np.sin(angle) * ys) % period
            m = phase < period // 3
        out[m] += color
    out = 0.5 + 0.5 * np.tanh(out)
    return out.astype(np.float32)


def synthesize_clip(
    rng: np.random.Generator,
    height: int = 192,
    width: int = 192,
    frames: int = 15,
    motion: str = "small",
) -> list[Frame]:
    """Global-motion clip in high resolution.

    motion "small" drifts about 1-3 px/frame of translation or 1-2 degrees
    of rotation (HR units); "large" uses 8-24 px/frame or 3-6 degrees.
    """
    require(motion in ("small", "large"), f"unknown motion class {motion!r}")
    kind = "translate" if rng.random() < 0.5 else "rotate"
    if motion == "small":
        speed = rng.uniform(1.0, 3.0)
        omega = np.deg2rad(rng.uniform(1.0, 2.0))
    else:
        speed = rng.uniform(8.0, 24.0)
        omega = np.deg2rad(rng.uniform(3.0, 6.0))
    direction = rng.uniform(0, 2 * np.pi)
    vx, vy = speed * np.cos(direction), speed * np.sin(direction)
    if kind == "translate":
        margin = int(np.ceil(speed * frames)) + 4
    else:
        margin = int(np.ceil(0.3 * max(height, width))) + 4
    ch, cw = height + 2 * margin, width + 2 * margin
    canvas = _texture(rng, ch, cw)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    out = []
    for t in range(frames):
        if kind == "translate":
            shift = (-t * vy, -t * vx)
            moved = np.stack(
                [
                    ndimage.shift(canvas[:, :, c], shift, order=3, mode="nearest")
                    for c in range(3)
                ],
                axis=2,
            )
        else:
            theta = sign * omega * t
            cos_t, sin_t = np.cos(theta), np.sin(theta)
            mat = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
            centre = np.array([(ch - 1) / 2.0, (cw - 1) / 2.0])
            offset = centre - mat @ centre
            moved = np.stack(
                [
                    ndimage.affine_transform(
                        canvas[:, :, c], mat, offset=offset, order=3, mode="nearest"
                    )
                    for c in range(3)
                ],
                axis=2,
            )
        crop = moved[margin : margin + height, margin : margin + width]
        out.append(Frame(np.ascontiguousarray(np.clip(crop, 0.0, 1.0).astype(np.float32))))
    return out


def build_dataset(
    seed: int,
    clips: int,
    height: int = 192,
    width: int = 192,
    frames: int = 15,
    motion: str = "small",
    scale: int = 4,
    encode: bool = False,
    gop: int = 8,
    block_size: int = 8,
    search: int = 8,
    quant: int = 4,
) -> list[Clip]:
    """Generate clips; optionally run the codec for evaluation use."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(clips):
        hr = synthesize_clip(rng, height, width, frames, motion)
        lr_source = [bicubic_downsample(f, scale) for f in hr]
        clip = Clip(hr=hr, lr_source=lr_source)
        if encode:
            clip.decoded, clip.priors = encode_lr(
                lr_source, gop=gop, block_size=block_size, search=search, quant=quant
            )
        out.append(clip)
    return out


def load_clip_dirs(root: str, scale: int = 4) -> list[Clip]:
    """Each subdirectory of root is one clip of high-resolution PNGs."""
    if not os.path.isdir(root):
        raise ParseError(f"not a directory: {root}")
    names = sorted(
        n for n in os.listdir(root) if os.path.isdir(os.path.join(root, n))
    )
    if not names:
        raise ParseError(f"no clip subdirectories under {root}")
    clips = []
    for name in names:
        hr = load_frame_dir(os.path.join(root, name))
        lr_source = [bicubic_downsample(f, scale) for f in hr]
        clips.append(Clip(hr=hr, lr_source=lr_source))
    return clips
