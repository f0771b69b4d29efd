"""Image container, binary PNM codec, and small pixel utilities.

Pixels live in ``[0, 1]`` as float64 everywhere inside the package; integer
samples only exist at the file boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    MalformedHeader,
    ShapeMismatch,
    TruncatedPixelData,
    UnsupportedMagic,
    ZeroMaxval,
)

__all__ = [
    "Image",
    "load_pnm",
    "save_pnm",
    "read_image",
    "write_image",
    "to_y_channel",
    "quantize_gray",
    "perturbation_distance",
    "LUMA_WEIGHTS",
]

# BT.601 luma, kept in thousandths so that white maps to exactly 1.0
_LUMA_MILLI = np.array([299.0, 587.0, 114.0])
LUMA_WEIGHTS = _LUMA_MILLI / 1000.0


@dataclass(frozen=True, eq=False)
class Image:
    """An immutable ``H x W x C`` image with real pixels in ``[0, 1]``.

    ``pixels`` is always a read-only float64 array of shape ``(H, W, C)``
    with ``C`` equal to 1 (gray) or 3 (RGB).
    """

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)  # always a private copy
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeMismatch(f"expected HxW or HxWx{{1,3}} pixels, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatch(f"image must have positive height and width, got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("pixel values must be finite and lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    @property
    def size(self) -> int:
        return self.pixels.size

    def flat(self) -> np.ndarray:
        """Row-major, channel-interleaved pixel vector."""
        return self.pixels.reshape(-1)

    @classmethod
    def clipped(cls, array) -> "Image":
        """Build an image from an arbitrary real array, clipping to ``[0, 1]``."""
        return cls(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0))

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def _skip_whitespace_and_comments(data: bytes, pos: int) -> int:
    n = len(data)
    while pos < n:
        ch = data[pos]
        if ch in b" \t\r\n\x0b\x0c":
            pos += 1
        elif ch == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    return pos


def _read_header_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    pos = _skip_whitespace_and_comments(data, pos)
    start = pos
    while pos < len(data) and 48 <= data[pos] <= 57:
        pos += 1
    if pos == start:
        raise MalformedHeader(f"expected {what}", start)
    if pos >= len(data) or data[pos] not in b" \t\r\n\x0b\x0c#":
        raise MalformedHeader(f"{what} not followed by whitespace", pos)
    return int(data[start:pos]), pos


def load_pnm(data: bytes) -> Image:
    """Decode a binary PGM (``P5``) or PPM (``P6``) byte string.

    Samples are divided by ``maxval``; 16-bit samples are big-endian.
    """
    data = bytes(data)
    if len(data) < 2:
        raise MalformedHeader("file too short for a magic number", 0)
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    elif data[:1] == b"P":
        raise UnsupportedMagic(f"unsupported PNM magic {magic!r}", 0)
    else:
        raise MalformedHeader(f"not a PNM file (magic {magic!r})", 0)

    width, pos = _read_header_int(data, 2, "width")
    height, pos = _read_header_int(data, pos, "height")
    maxval_start = _skip_whitespace_and_comments(data, pos)
    maxval, pos = _read_header_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise MalformedHeader("width and height must be positive", maxval_start)
    if maxval == 0:
        raise ZeroMaxval("maxval is zero", maxval_start)
    if maxval > 65535:
        raise MalformedHeader(f"maxval {maxval} exceeds 65535", maxval_start)
    if data[pos] == ord("#"):
        raise MalformedHeader("comment between maxval and pixel data", pos)
    pos += 1  # exactly one whitespace byte before the raster

    sample_bytes = 1 if maxval < 256 else 2
    count = width * height * channels
    needed = count * sample_bytes
    if len(data) - pos < needed:
        raise TruncatedPixelData(
            f"need {needed} pixel bytes, found {len(data) - pos}", len(data)
        )
    dtype = np.uint8 if sample_bytes == 1 else np.dtype(">u2")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raw.max(initial=0) > maxval:
        bad = int(np.argmax(raw > maxval))
        raise MalformedHeader(f"sample exceeds maxval {maxval}", pos + bad * sample_bytes)
    pixels = raw.astype(np.float64).reshape(height, width, channels) / maxval
    return Image(pixels)


def save_pnm(image: Image, maxval: int = 255) -> bytes:
    """Encode ``image`` as binary PNM; ``P5`` for gray, ``P6`` for RGB."""
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    magic = "P5" if image.channels == 1 else "P6"
    header = f"{magic} {image.width} {image.height} {maxval}\n".encode("ascii")
    samples = np.floor(image.pixels * maxval + 0.5)
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    return header + samples.astype(dtype).tobytes()


def read_image(path) -> Image:
    return load_pnm(Path(path).read_bytes())


def write_image(path, image: Image, maxval: int = 255) -> None:
    Path(path).write_bytes(save_pnm(image, maxval))


def to_y_channel(image: Image) -> Image:
    """BT.601 luma of an RGB image; gray images pass through untouched."""
    if image.channels == 1:
        return image
    y = (image.pixels @ _LUMA_MILLI) / 1000.0
    return Image(np.clip(y, 0.0, 1.0))


def quantize_gray(image: Image, levels: int) -> np.ndarray:
    """Map a gray image to integer levels ``min(floor(g * L), L - 1)``."""
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    if image.channels != 1:
        raise ShapeMismatch("quantize_gray expects a single-channel image")
    q = np.floor(image.pixels[:, :, 0] * levels).astype(np.int64)
    return np.minimum(q, levels - 1)


def perturbation_distance(a: Image, b: Image, norm: str = "linf") -> float:
    """Distance between two same-shape images under ``"l2"`` or ``"linf"``."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    diff = (a.pixels - b.pixels).reshape(-1)
    norm = norm.lower()
    if norm == "linf":
        return float(np.max(np.abs(diff)))
    if norm == "l2":
        return float(np.sqrt(np.dot(diff, diff)))
    raise ValueError(f"unknown norm {norm!r}")
