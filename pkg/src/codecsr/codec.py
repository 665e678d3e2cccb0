"""Toy block codec that exposes decoder-side priors.

The point is not compression: it is to produce, deterministically, the
three signals a real decoder hands over for free — frame types, block
motion vectors, and quantized residual magnitudes — together with the
decoded low-resolution frames they describe.

Coding model. Frame t is an I-frame iff t % gop == 0. I-frames are coded
by uniform quantization of the source with step q = quant/255 and clamping
to [0, 1]; because q is an integer number of 1/255 steps, every decoded
pixel lands exactly on the 8-bit grid, so PNG round-trips are bit-exact.
P-frames are coded as pure motion compensation from the previous decoded
frame (no pixel correction): the decoder needs only the motion grid to
rebuild them, and the residual plane is carried purely as a prior that
tells the enhancer where prediction failed and by how much.

Motion search is full-search SAD over 8-bit luma with integer-pel
candidates in [-search, search]^2; a candidate is admissible for a block
only if the referenced window lies inside the frame. Ties prefer the
smallest |dx| + |dy|, then smaller dy, then smaller dx.

Sidecar layout (little-endian):

    magic "CDAP" | u16 version=1 | u32 frame count | u16 width | u16 height
    | u8 block size | u8 subpel shift | u16 reserved=0
    per frame: u8 type (0=I, 1=P); P-frames append the motion grid
    (ceil(H/B) x ceil(W/B) x i16 (dx, dy), row-major, units of 1/2^shift),
    the residual plane (H x W bytes, row-major), and f32 residual scale
    (residual value = byte / 255 * scale).
"""

from __future__ import annotations

import dataclasses
import enum
import math
import os
import struct
from itertools import product

import numpy as np
from PIL import Image

from ._kernels import _HAVE_NUMBA, _block_sad_jit
from .errors import ContractViolation, ParseError, require

_MAGIC = b"CDAP"
_VERSION = 1

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class FrameType(enum.Enum):
    I = 0
    P = 1


@dataclasses.dataclass
class Frame:
    """One RGB frame: (H, W, 3) float32 with values nominally in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        require(
            self.data.ndim == 3 and self.data.shape[2] == 3,
            f"frames are (H, W, 3), got {self.data.shape}",
        )
        require(self.data.dtype == np.float32, "frames hold float32 samples")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclasses.dataclass
class MotionField:
    """Per-block displacements into the reference frame.

    vectors[by, bx] = (dx, dy) in units of 1/2^subpel_shift pixels: the
    block at (by*B, bx*B) predicts from the reference window shifted by
    (dx, dy). Edge blocks may be smaller than B when the frame size is not
    a block multiple.
    """

    block_size: int
    subpel_shift: int
    vectors: np.ndarray  # (gh, gw, 2) int16

    def dense(self, height: int, width: int, dtype=np.float32) -> np.ndarray:
        """Per-pixel (2, H, W) field in pixel units, x-displacement first."""
        gh, gw, _ = self.vectors.shape
        b = self.block_size
        require(gh == -(-height // b) and gw == -(-width // b), "grid/frame mismatch")
        scalar = np.dtype(dtype).type
        scale = scalar(1.0) / scalar(1 << self.subpel_shift)
        full = np.repeat(np.repeat(self.vectors, b, axis=0), b, axis=1)
        return np.ascontiguousarray(
            full[:height, :width].transpose(2, 0, 1).astype(scalar) * scale
        )


def densify_motion(
    mv: MotionField, height: int, width: int, dtype=np.float32
) -> np.ndarray:
    """Nearest-block expansion of a block motion field to per-pixel.

    Every pixel inherits its block's vector unchanged; returns (2, H, W)
    in pixel units with the x-displacement first.
    """
    return mv.dense(height, width, dtype)


@dataclasses.dataclass
class ResidualMap:
    """Quantized magnitude of the luma prediction error, byte-coded."""

    values: np.ndarray  # (H, W) uint8
    scale: float  # plane value = byte / 255 * scale

    def plane(self, dtype=np.float32) -> np.ndarray:
        scalar = np.dtype(dtype).type
        return self.values.astype(scalar) * (scalar(self.scale) / scalar(255.0))


@dataclasses.dataclass
class PriorRecord:
    """Everything the decoder knows about one frame besides its pixels."""

    frame_type: FrameType
    motion: MotionField | None = None
    residual: ResidualMap | None = None


@dataclasses.dataclass
class PriorStream:
    width: int
    height: int
    block_size: int
    subpel_shift: int
    frames: list[PriorRecord]


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (as floats)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def luma(frame: Frame) -> np.ndarray:
    """Rec. 601 luma plane, float32 (H, W)."""
    return frame.data @ _LUMA


def luma_bytes(frame: Frame) -> np.ndarray:
    """8-bit luma used by the motion search, (H, W) int32 in [0, 255]."""
    y = round_half_away(luma(frame) * np.float32(255.0))
    return np.clip(y, 0, 255).astype(np.int32)


def assign_frame_types(count: int, gop: int) -> list[FrameType]:
    require(count >= 1 and gop >= 1, "need at least one frame and gop >= 1")
    return [FrameType.I if t % gop == 0 else FrameType.P for t in range(count)]


def _block_edges(extent: int, block: int) -> tuple[np.ndarray, np.ndarray]:
    starts = np.arange(0, extent, block)
    stops = np.minimum(starts + block, extent)
    return starts, stops


def candidate_order(search: int) -> list[tuple[int, int]]:
    """All (dx, dy) integer candidates sorted by the tie-break rule."""
    cands = list(product(range(-search, search + 1), repeat=2))
    return sorted(cands, key=lambda c: (abs(c[0]) + abs(c[1]), c[1], c[0]))


def estimate_motion(
    cur: Frame, ref: Frame, block_size: int = 8, search: int = 16
) -> MotionField:
    """Full-search SAD block matching on 8-bit luma.

    Partial blocks at the right/bottom edges participate with their actual
    footprint. Candidates whose referenced window would leave the frame
    are skipped; (0, 0) is always admissible.
    """
    require(cur.data.shape == ref.data.shape, "frame size mismatch")
    require(block_size >= 1 and search >= 0, "bad block size or search range")
    h, w = cur.height, cur.width
    cy = luma_bytes(cur)
    ry = luma_bytes(ref)
    y0s, y1s = _block_edges(h, block_size)
    x0s, x1s = _block_edges(w, block_size)
    gh, gw = len(y0s), len(x0s)
    order = candidate_order(search)
    if _HAVE_NUMBA:
        cand = np.asarray(order, dtype=np.int64)
        best_sad = np.full(gh * gw, np.iinfo(np.int64).max, dtype=np.int64)
        best_idx = np.zeros(gh * gw, dtype=np.int64)
        _block_sad_jit(cy, ry, cand, y0s, y1s, x0s, x1s, best_sad, best_idx)
        best = cand[best_idx].astype(np.int16).reshape(gh, gw, 2)
        return MotionField(block_size=block_size, subpel_shift=0, vectors=best)
    best_sad = np.full((gh, gw), np.iinfo(np.int64).max, dtype=np.int64)
    best = np.zeros((gh, gw, 2), dtype=np.int16)
    diff_full = np.zeros((h, w), dtype=np.int64)
    for dx, dy in order:
        rows = slice(max(0, -dy), min(h, h - dy))
        cols = slice(max(0, -dx), min(w, w - dx))
        if rows.start >= rows.stop or cols.start >= cols.stop:
            continue
        valid = ((y0s + dy >= 0) & (y1s + dy <= h))[:, None] & (
            (x0s + dx >= 0) & (x1s + dx <= w)
        )[None, :]
        if not valid.any():
            continue
        diff_full[:] = 0
        ref_rows = slice(rows.start + dy, rows.stop + dy)
        ref_cols = slice(cols.start + dx, cols.stop + dx)
        np.abs(cy[rows, cols] - ry[ref_rows, ref_cols], out=diff_full[rows, cols])
        sads = np.add.reduceat(np.add.reduceat(diff_full, y0s, axis=0), x0s, axis=1)
        better = valid & (sads < best_sad)
        best_sad[better] = sads[better]
        best[better] = (dx, dy)
    return MotionField(block_size=block_size, subpel_shift=0, vectors=best)


def mc_predict(ref: Frame, motion: MotionField) -> Frame:
    """Copy each block from its referenced window in the decoded reference.

    Only integer-pel motion is supported here (subpel_shift 0), matching
    what the search produces.
    """
    require(motion.subpel_shift == 0, "prediction expects integer-pel motion")
    h, w = ref.height, ref.width
    b = motion.block_size
    y0s, y1s = _block_edges(h, b)
    x0s, x1s = _block_edges(w, b)
    gh, gw, _ = motion.vectors.shape
    require((gh, gw) == (len(y0s), len(x0s)), "motion grid does not fit the frame")
    out = np.empty_like(ref.data)
    for by in range(gh):
        for bx in range(gw):
            dx, dy = int(motion.vectors[by, bx, 0]), int(motion.vectors[by, bx, 1])
            y0, y1 = y0s[by], y1s[by]
            x0, x1 = x0s[bx], x1s[bx]
            require(
                0 <= y0 + dy and y1 + dy <= h and 0 <= x0 + dx and x1 + dx <= w,
                f"motion vector ({dx}, {dy}) leaves the frame at block ({by}, {bx})",
            )
            out[y0:y1, x0:x1] = ref.data[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
    return Frame(out)


def compute_residual(cur: Frame, predicted: Frame) -> np.ndarray:
    """Absolute luma prediction error, float32 (H, W)."""
    return np.abs(luma(cur) - luma(predicted))


def quantize_residual(plane: np.ndarray, quant: int) -> ResidualMap:
    """Quantize |residual| with step quant/255 into byte codes.

    Code k stands for the value k * quant / 255; the stored scale is
    255 * q = quant so readers recover values as byte / 255 * scale.
    """
    require(1 <= quant <= 255, "quant step is an integer count of 1/255 steps")
    q = np.float32(quant) / np.float32(255.0)
    codes = np.clip(round_half_away(plane / q), 0, 255).astype(np.uint8)
    return ResidualMap(values=codes, scale=float(np.float32(quant)))


def quantize_intra(frame: Frame, quant: int) -> Frame:
    """Uniform quantization with step quant/255, clamped to [0, 1].

    Work happens on the 8-bit integer grid so decoded values are exact
    multiples of 1/255 (up to the final clamp at 255).
    """
    require(1 <= quant <= 255, "quant step is an integer count of 1/255 steps")
    scaled = frame.data.astype(np.float32) * np.float32(255.0)
    k = round_half_away(scaled / np.float32(quant))
    levels = np.clip(k * quant, 0, 255).astype(np.float32)
    return Frame(levels / np.float32(255.0))


def encode_lr(
    lr_source: list[Frame],
    gop: int = 25,
    block_size: int = 8,
    search: int = 16,
    quant: int = 4,
) -> tuple[list[Frame], PriorStream]:
    """Run the closed coding loop over low-resolution source frames.

    Returns the decoded frames the enhancer will see and the prior stream
    describing them. Decoding is closed-loop: motion search and prediction
    reference decoded frames, never the source.
    """
    require(len(lr_source) >= 1, "need at least one frame")
    h, w = lr_source[0].height, lr_source[0].width
    for f in lr_source:
        require((f.height, f.width) == (h, w), "all frames must share one size")
    types = assign_frame_types(len(lr_source), gop)
    decoded: list[Frame] = []
    records: list[PriorRecord] = []
    for t, (src, ftype) in enumerate(zip(lr_source, types)):
        if ftype is FrameType.I:
            dec = quantize_intra(src, quant)
            records.append(PriorRecord(frame_type=FrameType.I))
        else:
            motion = estimate_motion(src, decoded[t - 1], block_size, search)
            predicted = mc_predict(decoded[t - 1], motion)
            residual = quantize_residual(compute_residual(src, predicted), quant)
            dec = predicted
            records.append(
                PriorRecord(frame_type=FrameType.P, motion=motion, residual=residual)
            )
        decoded.append(dec)
    stream = PriorStream(
        width=w,
        height=h,
        block_size=block_size,
        subpel_shift=0,
        frames=records,
    )
    return decoded, stream


def bicubic_downsample(frame: Frame, scale: int) -> Frame:
    """Bicubic decimation by an integer factor, per channel."""
    require(scale >= 1, "scale must be positive")
    require(
        frame.height % scale == 0 and frame.width % scale == 0,
        f"frame {frame.height}x{frame.width} not divisible by scale {scale}",
    )
    if scale == 1:
        return Frame(frame.data.copy())
    size = (frame.width // scale, frame.height // scale)
    planes = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(frame.data[:, :, c]), mode="F").resize(
                size, resample=Image.Resampling.BICUBIC
            ),
            dtype=np.float32,
        )
        for c in range(3)
    ]
    return Frame(np.ascontiguousarray(np.stack(planes, axis=2)))


def encode_stream(
    hr_frames: list[Frame],
    scale: int = 4,
    gop: int = 25,
    block_size: int = 8,
    search: int = 16,
    quant: int = 4,
) -> tuple[list[Frame], PriorStream]:
    """Downsample high-resolution frames bicubically, then code them."""
    lr_source = [bicubic_downsample(f, scale) for f in hr_frames]
    return encode_lr(lr_source, gop=gop, block_size=block_size, search=search, quant=quant)


def decode_from_sidecar(stream: PriorStream, intra_frames: list[Frame]) -> list[Frame]:
    """Rebuild every decoded frame from priors plus the I-frame images.

    intra_frames supplies the decoded I-frames in stream order; P-frames
    are reproduced bit-exactly by motion compensation alone.
    """
    require(len(stream.frames) >= 1, "empty prior stream")
    require(
        stream.frames[0].frame_type is FrameType.I,
        "the first frame of a stream must be an I-frame",
    )
    wanted = sum(1 for r in stream.frames if r.frame_type is FrameType.I)
    require(
        len(intra_frames) == wanted,
        f"stream has {wanted} I-frames but {len(intra_frames)} images were given",
    )
    out: list[Frame] = []
    next_intra = 0
    for record in stream.frames:
        if record.frame_type is FrameType.I:
            frame = intra_frames[next_intra]
            next_intra += 1
            require(
                (frame.height, frame.width) == (stream.height, stream.width),
                "I-frame image size does not match the stream header",
            )
        else:
            require(record.motion is not None, "P-frame record lacks motion")
            frame = mc_predict(out[-1], record.motion)
        out.append(frame)
    return out


# ---------------------------------------------------------------------------
# Sidecar serialization


def write_sidecar(stream: PriorStream, path: str) -> None:
    h, w = stream.height, stream.width
    gh = -(-h // stream.block_size)
    gw = -(-w // stream.block_size)
    chunks = [
        _MAGIC,
        struct.pack(
            "<HIHHBBH",
            _VERSION,
            len(stream.frames),
            w,
            h,
            stream.block_size,
            stream.subpel_shift,
            0,
        ),
    ]
    for record in stream.frames:
        chunks.append(struct.pack("<B", record.frame_type.value))
        if record.frame_type is FrameType.P:
            require(
                record.motion is not None and record.residual is not None,
                "P-frame records need motion and residual",
            )
            require(
                record.motion.vectors.shape == (gh, gw, 2),
                "motion grid does not match the stream header",
            )
            require(
                record.residual.values.shape == (h, w),
                "residual plane does not match the stream header",
            )
            chunks.append(
                np.ascontiguousarray(record.motion.vectors, dtype="<i2").tobytes()
            )
            chunks.append(np.ascontiguousarray(record.residual.values).tobytes())
            chunks.append(struct.pack("<f", record.residual.scale))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_sidecar(path: str) -> PriorStream:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(blob):
            raise ParseError(f"truncated while reading {what}", offset=pos)
        out = blob[pos : pos + count]
        pos += count
        return out

    if take(4, "magic") != _MAGIC:
        raise ParseError("bad magic, not a prior sidecar", offset=0)
    version, count, w, h, block, shift, reserved = struct.unpack(
        "<HIHHBBH", take(14, "header")
    )
    if version != _VERSION:
        raise ParseError(f"unsupported sidecar version {version}", offset=4)
    if count == 0 or w == 0 or h == 0 or block == 0:
        raise ParseError("degenerate sidecar header", offset=4)
    if reserved != 0:
        raise ParseError("reserved header field is not zero", offset=16)
    gh = -(-h // block)
    gw = -(-w // block)
    frames: list[PriorRecord] = []
    for t in range(count):
        (raw_type,) = struct.unpack("<B", take(1, f"type of frame {t}"))
        if raw_type not in (FrameType.I.value, FrameType.P.value):
            raise ParseError(f"unknown frame type {raw_type}", offset=pos - 1)
        if raw_type == FrameType.I.value:
            frames.append(PriorRecord(frame_type=FrameType.I))
            continue
        mv = np.frombuffer(
            take(2 * 2 * gh * gw, f"motion grid of frame {t}"), dtype="<i2"
        ).reshape(gh, gw, 2)
        res = np.frombuffer(
            take(h * w, f"residual plane of frame {t}"), dtype=np.uint8
        ).reshape(h, w)
        (scale,) = struct.unpack("<f", take(4, f"residual scale of frame {t}"))
        if not math.isfinite(scale) or scale < 0:
            raise ParseError(f"bad residual scale {scale!r}", offset=pos - 4)
        frames.append(
            PriorRecord(
                frame_type=FrameType.P,
                motion=MotionField(
                    block_size=block,
                    subpel_shift=shift,
                    vectors=mv.astype(np.int16),
                ),
                residual=ResidualMap(values=res.copy(), scale=scale),
            )
        )
    if pos != len(blob):
        raise ParseError("trailing bytes after last frame", offset=pos)
    return PriorStream(
        width=w, height=h, block_size=block, subpel_shift=shift, frames=frames
    )


# ---------------------------------------------------------------------------
# Frame directory I/O


def load_frame_dir(path: str) -> list[Frame]:
    """Read every PNG in a directory, sorted by filename, as [0, 1] RGB."""
    if not os.path.isdir(path):
        raise ParseError(f"not a directory: {path}")
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    if not names:
        raise ParseError(f"no .png frames found in {path}")
    frames = []
    for name in names:
        with Image.open(os.path.join(path, name)) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
        frames.append(Frame(arr / np.float32(255.0)))
    return frames


def save_frame_dir(frames: list[Frame], path: str) -> None:
    """Write frames as 00000000.png, 00000001.png, ... 8-bit RGB."""
    os.makedirs(path, exist_ok=True)
    for t, frame in enumerate(frames):
        scaled = round_half_away(np.clip(frame.data, 0.0, 1.0) * np.float32(255.0))
        img = Image.fromarray(scaled.astype(np.uint8), mode="RGB")
        img.save(os.path.join(path, f"{t:08d}.png"))
