"""Bayer RAW frames, RGBG packing and the conditioning stack.

A packed frame is a float32 array of shape ``(4, H/2, W/2)`` with channels in
R, G1, B, G2 order, black level removed and scaled so that the white level
maps to 1.0. Batched code uses ``(N, 4, h, w)``.
"""

from __future__ import annotations

import dataclasses
import os
from typing import Optional, Union

import numpy as np

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
HIST_BINS = 4096
R4_MAGIC = b"R4\n"
R4_HEADER_SIZE = 128


class RawFormatError(ValueError):
    """Malformed RAW container or inconsistent frame metadata."""


@dataclasses.dataclass
class RawImage:
    """Mosaiced sensor frame (uint16 DN, row-major) and its calibration."""

    mosaic: np.ndarray
    pattern: str = "RGGB"
    black_level: int = 512
    white_level: int = 16383
    exposure_ratio: float = 1.0
    camera_id: str = "synthetic"

    def __post_init__(self):
        self.mosaic = np.asarray(self.mosaic)
        if self.mosaic.ndim != 2:
            raise RawFormatError(f"mosaic must be 2-D, got shape {self.mosaic.shape}")
        h, w = self.mosaic.shape
        if h % 2 or w % 2:
            raise RawFormatError(f"mosaic dimensions must be even, got {w}x{h}")
        if self.pattern not in PATTERNS:
            raise RawFormatError(f"unknown Bayer pattern {self.pattern!r}")
        if not 0 <= self.black_level < self.white_level:
            raise RawFormatError(f"need 0 <= black_level < white_level, got {self.black_level}, {self.white_level}")
        if self.exposure_ratio < 1:
            raise RawFormatError(f"exposure_ratio must be >= 1, got {self.exposure_ratio}")
        if self.mosaic.size and int(self.mosaic.max()) > self.white_level:
            raise RawFormatError(f"sample {int(self.mosaic.max())} exceeds white level {self.white_level}")
        if any(c in self.camera_id for c in "\n="):
            raise RawFormatError("camera_id may not contain newlines or '='")
        self.mosaic = self.mosaic.astype(np.uint16)

    @property
    def width(self) -> int:
        return self.mosaic.shape[1]

    @property
    def height(self) -> int:
        return self.mosaic.shape[0]

    @property
    def data_range(self) -> int:
        return self.white_level - self.black_level


def _plane_offsets(pattern: str) -> list[tuple[int, int]]:
    """(row, col) offset inside the 2x2 tile for each of R, G1, B, G2."""
    pos = {}
    greens = []
    for k, ch in enumerate(pattern):
        rc = (k // 2, k % 2)
        if ch == "G":
            greens.append(rc)
        else:
            pos[ch] = rc
    # G1 shares a row with R
    g1, g2 = greens if greens[0][0] == pos["R"][0] else greens[::-1]
    return [pos["R"], g1, pos["B"], g2]


def pack(raw: RawImage) -> np.ndarray:
    """Subtract black level, normalize by the data range and split into R,G1,B,G2."""
    d = raw.mosaic.astype(np.float64) - raw.black_level
    d = np.clip(d, 0, None) / raw.data_range
    planes = [d[r::2, c::2] for r, c in _plane_offsets(raw.pattern)]
    return np.stack(planes).astype(np.float32)


def unpack(p: np.ndarray, pattern: str = "RGGB", black_level: int = 512, white_level: int = 16383,
           exposure_ratio: float = 1.0, camera_id: str = "synthetic") -> RawImage:
    """Inverse of :func:`pack`; values are clipped to [0, 1] and rounded to the DN grid."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != 4:
        raise RawFormatError(f"packed frame must have shape (4, h, w), got {p.shape}")
    rng_dn = white_level - black_level
    dn = np.rint(np.clip(p, 0.0, 1.0) * rng_dn) + black_level
    h, w = p.shape[1:]
    mosaic = np.zeros((2 * h, 2 * w), dtype=np.uint16)
    for plane, (r, c) in zip(dn, _plane_offsets(pattern)):
        mosaic[r::2, c::2] = plane
    return RawImage(mosaic, pattern, black_level, white_level, exposure_ratio, camera_id)


def hist_equalize(p: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Global histogram equalization over all channels jointly.

    Each value maps to the fraction of samples falling in its bin or below,
    with bins spanning ``[0, max]``. Constant frames map to zeros.
    """
    p = np.asarray(p)
    flat = p.astype(np.float64).ravel()
    lo, hi = 0.0, float(flat.max())
    if hi <= lo or np.all(flat == flat[0]):
        return np.zeros_like(p, dtype=np.float32)
    idx = np.minimum((np.clip(flat, lo, hi) / hi * bins).astype(np.int64), bins - 1)
    cdf = np.cumsum(np.bincount(idx, minlength=bins)) / flat.size
    return cdf[idx].reshape(p.shape).astype(np.float32)


def position_encoding(h: int, w: int) -> np.ndarray:
    """Two channels of normalized row and column coordinates in [0, 1]."""
    if h < 1 or w < 1:
        raise ValueError(f"position_encoding needs h, w >= 1, got {h}x{w}")
    rows = np.arange(h, dtype=np.float64) / max(h - 1, 1)
    cols = np.arange(w, dtype=np.float64) / max(w - 1, 1)
    enc = np.empty((2, h, w), dtype=np.float32)
    enc[0] = rows[:, None]
    enc[1] = cols[None, :]
    return enc


def build_condition(p: np.ndarray) -> np.ndarray:
    """Stack [packed(4) | position encoding(2) | histogram-equalized(4)] -> (10, h, w)."""
    p = np.asarray(p, dtype=np.float32)
    if p.ndim != 3 or p.shape[0] != 4:
        raise ValueError(f"expected packed frame (4, h, w), got {p.shape}")
    h, w = p.shape[1:]
    return np.concatenate([p, position_encoding(h, w), hist_equalize(p)], axis=0)


def amplify(noisy: np.ndarray, ratio: float) -> np.ndarray:
    """Brighten a short exposure by ``ratio`` and saturate at 1."""
    return np.clip(np.asarray(noisy, dtype=np.float32) * np.float32(ratio), 0.0, 1.0)


def downsample(x: np.ndarray, r: int) -> np.ndarray:
    """Non-overlapping r x r mean over the last two axes; r=1 is the identity."""
    if r not in (1, 2):
        raise ValueError(f"downsample factor must be 1 or 2, got {r}")
    if r == 1:
        return x
    h, w = x.shape[-2:]
    if h % r or w % r:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {r}")
    lead = x.shape[:-2]
    y = x.reshape(*lead, h // r, r, w // r, r).mean(axis=(-3, -1), dtype=np.float64)
    return y.astype(x.dtype)


def upsample(x: np.ndarray, r: int) -> np.ndarray:
    """Nearest-neighbor replication by ``r`` over the last two axes."""
    if r not in (1, 2):
        raise ValueError(f"upsample factor must be 1 or 2, got {r}")
    if r == 1:
        return x
    return np.repeat(np.repeat(x, r, axis=-2), r, axis=-1)


def crop(p: np.ndarray, size: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Square crop of side ``size``; centered when ``rng`` is None, else random.

    Offsets are kept even so a crop of a packed frame stays aligned with the
    2x2 pooling grid used by the pyramid schedule.
    """
    h, w = p.shape[-2:]
    if size > min(h, w) or size < 1:
        raise ValueError(f"crop size {size} does not fit a {h}x{w} frame")
    if rng is None:
        top, left = (h - size) // 2, (w - size) // 2
        top -= top % 2
        left -= left % 2
    else:
        top = 2 * int(rng.integers(0, (h - size) // 2 + 1))
        left = 2 * int(rng.integers(0, (w - size) // 2 + 1))
    return p[..., top : top + size, left : left + size]


# ---------------------------------------------------------------------------
# .r4 container
#
# Layout: a 128-byte ASCII header followed by width*height little-endian
# uint16 samples in row-major order. The header starts with b"R4\n" and holds
# one "key=value\n" line per field in this order:
#   width, height, pattern, black_level, white_level, exposure_ratio, camera_id
# The remainder of the 128 bytes is padded with b" " and the final byte is
# b"\n".

_R4_FIELDS = ("width", "height", "pattern", "black_level", "white_level", "exposure_ratio", "camera_id")


def encode_r4(raw: RawImage) -> bytes:
    lines = [
        f"width={raw.width}",
        f"height={raw.height}",
        f"pattern={raw.pattern}",
        f"black_level={raw.black_level}",
        f"white_level={raw.white_level}",
        f"exposure_ratio={raw.exposure_ratio!r}",
        f"camera_id={raw.camera_id}",
    ]
    header = R4_MAGIC + ("\n".join(lines) + "\n").encode("ascii")
    if len(header) > R4_HEADER_SIZE - 1:
        raise RawFormatError(f"header too long ({len(header)} bytes); shorten camera_id")
    header = header + b" " * (R4_HEADER_SIZE - 1 - len(header)) + b"\n"
    return header + raw.mosaic.astype("<u2").tobytes()


def decode_r4(blob: bytes) -> RawImage:
    if len(blob) < R4_HEADER_SIZE:
        raise RawFormatError(f"truncated header: {len(blob)} of {R4_HEADER_SIZE} bytes")
    if not blob.startswith(R4_MAGIC):
        raise RawFormatError("bad magic, not an .r4 file")
    text = blob[len(R4_MAGIC) : R4_HEADER_SIZE].decode("ascii", errors="strict")
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise RawFormatError(f"malformed header line {line!r}")
        fields[key] = value
    missing = [k for k in _R4_FIELDS if k not in fields]
    if missing:
        raise RawFormatError(f"header missing fields: {missing}")
    try:
        width, height = int(fields["width"]), int(fields["height"])
        black, white = int(fields["black_level"]), int(fields["white_level"])
        ratio = float(fields["exposure_ratio"])
    except ValueError as exc:
        raise RawFormatError(f"bad numeric header field: {exc}") from None
    need = width * height * 2
    payload = blob[R4_HEADER_SIZE:]
    if len(payload) != need:
        raise RawFormatError(f"payload is {len(payload)} bytes, expected {need} for {width}x{height}")
    mosaic = np.frombuffer(payload, dtype="<u2").reshape(height, width).astype(np.uint16)
    return RawImage(mosaic, fields["pattern"], black, white, ratio, fields["camera_id"])


def write_r4(path: Union[str, os.PathLike], raw: RawImage) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_r4(raw))


def read_r4(path: Union[str, os.PathLike]) -> RawImage:
    with open(path, "rb") as fh:
        return decode_r4(fh.read())
