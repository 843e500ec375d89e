"""Codecs that let 8-bit lossy image transport carry depth and label data.

Depth packing spreads each 16-bit depth value over three 8-bit channels: a
coarse linear channel plus two phase-shifted triangle waves whose quadrature
relationship survives small per-channel errors. Labels are spaced across the
luma range so codec noise cannot move one user id onto another. A small
reference lossy codec (delta + deadzone + run-length) stands in for a real
video codec so loss robustness is testable without external dependencies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DepthFrame, LabelFrame, MAX_USER_LABEL

LABEL_STEP = 17
FULL_DEPTH_RANGE = 65536
COARSE_BUCKETS = 256

LOSSY_MAGIC = 0xC5
LOSSY_VERSION = 0x01
MAX_DEADZONE = 32
_TOKEN_ZERO_RUN = 0x00
_TOKEN_LITERAL = 0x01

# Token byte plus single-byte varint, precomputed for run lengths under 128.
_ZERO_HEADS = [bytes((_TOKEN_ZERO_RUN, n)) for n in range(128)]
_LITERAL_HEADS = [bytes((_TOKEN_LITERAL, n)) for n in range(128)]


class CodecError(ValueError):
    """Malformed or inconsistent codec input."""


@dataclass(frozen=True)
class DepthPackingParams:
    """w is the full-scale depth range; P the triangle half-period count.

    The fine channels complete P monotone segments across the range, so one
    full triangle period spans 2w/P depth units.
    """

    w: int = FULL_DEPTH_RANGE
    P: int = 512

    def __post_init__(self):
        if self.w != FULL_DEPTH_RANGE:
            raise ValueError("w is fixed at 65536 for 16-bit depth")
        if self.P < 2 or self.P % 2:
            raise ValueError("P must be a positive even integer")

    @property
    def fine_period(self) -> float:
        return 2.0 * self.w / self.P


@dataclass(frozen=True, eq=False)
class PackedDepthFrame:
    """Three 8-bit channels: coarse linear (L) and triangle pair (Ha, Hb)."""

    width: int
    height: int
    coarse: np.ndarray
    fine_a: np.ndarray
    fine_b: np.ndarray

    def __post_init__(self):
        for name in ("coarse", "fine_a", "fine_b"):
            arr = np.ascontiguousarray(getattr(self, name))
            if arr.shape != (self.height, self.width):
                raise CodecError(f"channel {name} has shape {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def tri(x):
    """Triangle wave with period 2 and range [0, 1]; tri(0) = 0, tri(1) = 1."""
    return 1.0 - np.abs(np.mod(x, 2.0) - 1.0)


def pack_depth_values(depth, params: DepthPackingParams | None = None, quantize: bool = True):
    """Pack depth values into (coarse, fine_a, fine_b) channel arrays.

    With quantize=True the channels are uint8; otherwise they are the exact
    real-valued channel levels on the same 0..255 scale.
    """
    params = params or DepthPackingParams()
    d = np.asarray(depth, dtype=np.float64)
    nd = d / params.w
    # The coarse channel is the bucket index d // (w/256). Its bucket width
    # equals the fine-channel period at P = 512, which makes the two
    # channels' information exactly complementary: coarse selects the
    # period, fine positions within it.
    fa = 255.0 * tri(nd * params.P)
    fb = 255.0 * tri(nd * params.P - 0.5)
    if quantize:
        coarse = np.floor(nd * COARSE_BUCKETS)
        return (
            coarse.astype(np.uint8),
            np.rint(fa).astype(np.uint8),
            np.rint(fb).astype(np.uint8),
        )
    return nd * COARSE_BUCKETS, fa, fb


def unpack_depth_values(coarse, fine_a, fine_b, params: DepthPackingParams | None = None):
    """Invert pack_depth_values; returns uint16 depth values.

    The two triangle channels are in quadrature. Their deviations from
    mid-level trace a diamond as depth sweeps one period; classifying which
    diamond edge the point lies on recovers the phase unambiguously, and the
    coarse channel then selects the period.
    """
    params = params or DepthPackingParams()
    ha = np.asarray(fine_a, dtype=np.float64) / 255.0
    hb = np.asarray(fine_b, dtype=np.float64) / 255.0
    dx = ha - 0.5
    dy = hb - 0.5
    u = dx + dy
    v = dx - dy
    on_x = np.abs(u) >= np.abs(v)
    phase = np.select(
        [
            on_x & (u <= 0),
            ~on_x & (v >= 0),
            on_x & (u > 0),
            ~on_x & (v < 0),
        ],
        [
            (ha - hb + 0.5) / 2.0,
            (ha + hb + 0.5) / 2.0,
            (2.5 - ha + hb) / 2.0,
            (4.5 - ha - hb) / 2.0,
        ],
    )
    fine_pos = phase * (params.fine_period / 2.0)

    c = np.asarray(coarse, dtype=np.float64)
    bucket = params.w / COARSE_BUCKETS
    if np.issubdtype(np.asarray(coarse).dtype, np.integer):
        coarse_depth = c * bucket + (bucket - 1) / 2.0
    else:
        coarse_depth = c * bucket
    k = np.rint((coarse_depth - fine_pos) / params.fine_period)
    d = np.rint(fine_pos + k * params.fine_period)
    return np.clip(d, 0, params.w - 1).astype(np.uint16)


def pack_depth(frame: DepthFrame, params: DepthPackingParams | None = None) -> PackedDepthFrame:
    coarse, fa, fb = pack_depth_values(frame.data, params)
    return PackedDepthFrame(frame.width, frame.height, coarse, fa, fb)


def unpack_depth(packed: PackedDepthFrame, params: DepthPackingParams | None = None,
                 timestamp_us: int = 0) -> DepthFrame:
    depth = unpack_depth_values(packed.coarse, packed.fine_a, packed.fine_b, params)
    return DepthFrame(packed.width, packed.height, depth, timestamp_us)


def encode_labels(frame: LabelFrame) -> np.ndarray:
    """Map user ids 0..15 onto luma 0, 17, ..., 255."""
    if frame.data.size and frame.data.max() > MAX_USER_LABEL:
        raise CodecError(f"label > {MAX_USER_LABEL}")
    return (frame.data.astype(np.uint16) * LABEL_STEP).astype(np.uint8)


def decode_labels(luma, timestamp_us: int = 0) -> LabelFrame:
    """Invert encode_labels; exact under any per-pixel error up to 8."""
    y = np.asarray(luma)
    v = np.clip(np.rint(y.astype(np.float64) / LABEL_STEP), 0, MAX_USER_LABEL)
    h, w = y.shape
    return LabelFrame(w, h, v.astype(np.uint8), timestamp_us)


def downscale_depth(frame: DepthFrame) -> DepthFrame:
    """Halve resolution by 2x2 min-pooling, ignoring zero (no-reading) pixels."""
    if frame.width % 2 or frame.height % 2:
        raise ValueError("downscale requires even dimensions")
    d = frame.data.astype(np.uint32)
    d = np.where(d == 0, np.uint32(0xFFFFFFFF), d)
    pooled = d.reshape(frame.height // 2, 2, frame.width // 2, 2).min(axis=(1, 3))
    pooled = np.where(pooled == 0xFFFFFFFF, 0, pooled).astype(np.uint16)
    return DepthFrame(frame.width // 2, frame.height // 2, pooled, frame.timestamp_us)


@dataclass(frozen=True)
class CodecQuality:
    """deadzone is the maximum absolute per-pixel error the codec may add."""

    deadzone: int = 0

    def __post_init__(self):
        if not (0 <= self.deadzone <= MAX_DEADZONE):
            raise ValueError(f"deadzone out of [0, {MAX_DEADZONE}]")


def _write_varint(buf: bytearray, n: int) -> None:
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            buf.append(b | 0x80)
        else:
            buf.append(b)
            return


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    out = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise CodecError("truncated varint")
        b = data[pos]
        pos += 1
        out |= (b & 0x7F) << shift
        if not b & 0x80:
            break
        shift += 7
        if shift > 28:
            raise CodecError("varint too long")
    if out > 0xFFFFFFFF:
        raise CodecError("varint exceeds 32 bits")
    return out, pos


def lossy_encode_reconstructed(
    grid: np.ndarray, prev: np.ndarray | None, quality: CodecQuality
) -> tuple[bytes, np.ndarray]:
    """lossy_encode plus the decoder's reconstruction, computed arithmetically.

    Closed-loop encoders need the decoded frame as the next prediction
    reference; returning it here saves a full parse of the stream just
    produced. The reconstruction is exactly what lossy_decode returns.
    """
    grid = np.asarray(grid, dtype=np.uint8)
    if grid.ndim != 2 or 0 in grid.shape:
        raise CodecError("grid must be a nonempty 2-d array")
    h, w = grid.shape
    if w > 0xFFFF or h > 0xFFFF:
        raise CodecError("grid dimensions exceed 16 bits")
    if prev is not None:
        prev = np.asarray(prev, dtype=np.uint8)
        if prev.shape != grid.shape:
            raise CodecError(f"prev shape {prev.shape} != grid shape {grid.shape}")
        pred = prev
    else:
        pred = np.full(grid.shape, 128, dtype=np.uint8)

    # Unsigned subtraction wraps mod 256, which is exactly the stored-byte
    # semantics. The signed residual is wrapped when grid >= pred and
    # wrapped - 256 otherwise, so each sign gets its own deadzone band.
    wrapped = grid - pred
    dz = quality.deadzone
    if dz:
        nonneg = grid >= pred
        keep = np.where(nonneg, wrapped > dz, wrapped < 256 - dz)
    else:
        keep = wrapped != 0
    stored = np.where(keep, wrapped, np.uint8(0)).view(np.int8).ravel()
    recon = np.where(keep, grid, pred)

    buf = bytearray()
    buf.append(LOSSY_MAGIC)
    buf.append(LOSSY_VERSION)
    buf += w.to_bytes(2, "little")
    buf += h.to_bytes(2, "little")
    buf.append(quality.deadzone)
    buf.append(0 if prev is None else 1)

    zero = stored == 0
    bounds = np.flatnonzero(np.diff(zero)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [stored.size]))
    raw = stored.tobytes()
    # Runs alternate strictly between zero and literal, so only the first
    # run's kind needs a lookup; short headers come from a prebuilt table.
    is_zero = bool(zero[0])
    parts = [bytes(buf)]
    append = parts.append
    for s, e in zip(starts.tolist(), ends.tolist()):
        n = e - s
        if is_zero:
            if n < 128:
                append(_ZERO_HEADS[n])
            else:
                head = bytearray((_TOKEN_ZERO_RUN,))
                _write_varint(head, n)
                append(bytes(head))
        else:
            if n < 128:
                append(_LITERAL_HEADS[n])
            else:
                head = bytearray((_TOKEN_LITERAL,))
                _write_varint(head, n)
                append(bytes(head))
            append(raw[s:e])
        is_zero = not is_zero
    return b"".join(parts), recon


def lossy_encode(grid: np.ndarray, prev: np.ndarray | None, quality: CodecQuality) -> bytes:
    """Encode an 8-bit grid as deadzone-quantized residuals against prev or 128.

    Residuals within the deadzone are dropped (zero-run tokens), the rest are
    stored exactly, so the decoded grid never deviates from the input by more
    than quality.deadzone per pixel.
    """
    return lossy_encode_reconstructed(grid, prev, quality)[0]


def lossy_header(data: bytes) -> tuple[int, int, int, bool]:
    """Parse a lossy stream header; returns (width, height, deadzone, uses_prev)."""
    if len(data) < 8:
        raise CodecError("truncated header")
    if data[0] != LOSSY_MAGIC:
        raise CodecError(f"bad magic 0x{data[0]:02X}")
    if data[1] != LOSSY_VERSION:
        raise CodecError(f"unsupported version {data[1]}")
    w = int.from_bytes(data[2:4], "little")
    h = int.from_bytes(data[4:6], "little")
    deadzone = data[6]
    flag = data[7]
    if flag not in (0, 1):
        raise CodecError(f"bad prediction flag {flag}")
    if deadzone > MAX_DEADZONE:
        raise CodecError(f"deadzone {deadzone} out of range")
    return w, h, deadzone, bool(flag)


def lossy_decode(data: bytes, prev: np.ndarray | None) -> np.ndarray:
    w, h, _, uses_prev = lossy_header(data)
    if w == 0 or h == 0:
        raise CodecError("zero dimension")
    if uses_prev:
        if prev is None:
            raise CodecError("stream predicts from previous frame but none given")
        prev = np.asarray(prev, dtype=np.uint8)
        if prev.shape != (h, w):
            raise CodecError(f"prev shape {prev.shape} != stream shape {(h, w)}")
        pred = prev.astype(np.int16).ravel()
    else:
        pred = np.full(h * w, 128, dtype=np.int16)

    total = h * w
    residual = np.zeros(total, dtype=np.int16)
    pos = 8
    filled = 0
    while filled < total:
        if pos >= len(data):
            raise CodecError(f"truncated stream at byte {pos}")
        token = data[pos]
        pos += 1
        if token == _TOKEN_ZERO_RUN:
            n, pos = _read_varint(data, pos)
        elif token == _TOKEN_LITERAL:
            n, pos = _read_varint(data, pos)
            if pos + n > len(data):
                raise CodecError("literal run past end of stream")
        else:
            raise CodecError(f"unknown token 0x{token:02X}")
        if n == 0:
            raise CodecError("empty run")
        if filled + n > total:
            raise CodecError(f"run total {filled + n} exceeds pixel count {total}")
        if token == _TOKEN_LITERAL:
            residual[filled:filled + n] = np.frombuffer(
                data, dtype=np.int8, count=n, offset=pos
            )
            pos += n
        filled += n
    if pos != len(data):
        raise CodecError(f"{len(data) - pos} trailing bytes")
    return ((pred + residual) % 256).astype(np.uint8).reshape(h, w)
