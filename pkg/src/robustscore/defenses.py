"""Input-transformation defenses.

``Barrage`` applies a random number of randomly parameterized transforms
from a fixed five-member pool, in random order. ``YMedian`` median-filters
only the luma plane. ``Identity`` is the do-nothing baseline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import fft, ndimage

from .errors import EmptyPool
from .imageio import Image

__all__ = [
    "TransformSpec",
    "DefenseConfig",
    "POOL",
    "apply_transform",
    "sample_barrage",
    "apply_barrage",
    "y_median_denoise",
    "identity_defense",
    "apply_defense",
    "derive_seed",
    "rgb_to_ycbcr",
    "ycbcr_to_rgb",
]

POOL = ("bit_depth", "median_blur", "gaussian_blur", "additive_noise", "block_dct")

# Standard JPEG luminance table (ITU T.81 Annex K).
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCBCR_INV = np.linalg.inv(_YCBCR)


@dataclass(frozen=True)
class TransformSpec:
    """One pool member with its drawn parameters.

    Parameter ranges: ``bits`` in 1..7, ``window`` in {3, 5}, blur ``sigma``
    in [0.5, 2.0], noise ``sigma`` in [0.01, 0.05] (plus the ``noise_seed``
    for the noise field), DCT ``quality`` in 10..90.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.params
        k = self.kind
        if k == "bit_depth":
            ok = 1 <= p["bits"] <= 7
        elif k == "median_blur":
            ok = p["window"] in (3, 5)
        elif k == "gaussian_blur":
            ok = 0.5 <= p["sigma"] <= 2.0
        elif k == "additive_noise":
            ok = 0.01 <= p["sigma"] <= 0.05
        elif k == "block_dct":
            ok = 10 <= p["quality"] <= 90
        else:
            raise ValueError(f"unknown transform {k!r}")
        if not ok:
            raise ValueError(f"{k} parameters out of range: {p}")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "barrage"
    seed: int = 0
    max_transforms: int = len(POOL)
    window: int = 3

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ("barrage", "ymedian", "identity"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.window not in (3, 5):
            raise ValueError("median window must be 3 or 5")

    def for_image(self, index: int) -> "DefenseConfig":
        return replace(self, seed=derive_seed(self.seed, index))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.kind == "barrage":
            d["pool"] = list(POOL)
        return d


def derive_seed(seed: int, index: int) -> int:
    """Per-image seed; XOR keeps parallel and serial runs in agreement."""
    return int(seed) ^ int(index)


def _per_channel(pixels: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(pixels[:, :, c]) for c in range(pixels.shape[2])], axis=2)


def _bit_depth(pixels, bits):
    scale = 2**bits - 1
    return np.floor(pixels * scale + 0.5) / scale


def _median(pixels, window):
    return _per_channel(pixels, lambda p: ndimage.median_filter(p, size=window, mode="nearest"))


def _gaussian_kernel(sigma):
    radius = math.ceil(3 * sigma)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _gaussian(pixels, sigma):
    k = _gaussian_kernel(sigma)

    def blur(p):
        p = ndimage.convolve1d(p, k, axis=0, mode="nearest")
        return ndimage.convolve1d(p, k, axis=1, mode="nearest")

    return _per_channel(pixels, blur)


def _quant_table(quality):
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1.0)


def _block_dct(pixels, quality):
    table = _quant_table(quality)

    def squash(p):
        h, w = p.shape
        ph, pw = -h % 8, -w % 8
        padded = np.pad(p, ((0, ph), (0, pw)), mode="edge") * 255.0 - 128.0
        H, W = padded.shape
        blocks = padded.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
        coef = fft.dctn(blocks, type=2, axes=(2, 3), norm="ortho")
        dc = coef[:, :, 0, 0].copy()
        coef = np.floor(coef / table + 0.5) * table
        coef[:, :, 0, 0] = dc  # DC is kept exact so flat regions survive
        out = fft.idctn(coef, type=2, axes=(2, 3), norm="ortho")
        out = out.transpose(0, 2, 1, 3).reshape(H, W)
        return ((out + 128.0) / 255.0)[:h, :w]

    return _per_channel(pixels, squash)


def apply_transform(image: Image, spec: TransformSpec) -> Image:
    p = image.pixels
    k = spec.kind
    if k == "bit_depth":
        out = _bit_depth(p, spec.params["bits"])
    elif k == "median_blur":
        out = _median(p, spec.params["window"])
    elif k == "gaussian_blur":
        out = _gaussian(p, spec.params["sigma"])
    elif k == "additive_noise":
        rng = np.random.default_rng(spec.params["noise_seed"])
        out = p + rng.normal(0.0, spec.params["sigma"], size=p.shape)
    else:
        out = _block_dct(p, spec.params["quality"])
    return Image.clipped(out)


def sample_barrage(config: DefenseConfig) -> list[TransformSpec]:
    """Draw the transform sequence for ``config.seed``.

    Count ``k`` uniform in ``1..max_transforms``, then ``k`` distinct pool
    members in drawn order, then each member's parameters.
    """
    if config.max_transforms < 1:
        raise EmptyPool("max_transforms must be at least 1")
    if config.max_transforms > len(POOL):
        raise ValueError(f"max_transforms cannot exceed the pool size {len(POOL)}")
    rng = np.random.default_rng(config.seed)
    k = int(rng.integers(1, config.max_transforms + 1))
    chosen = rng.choice(len(POOL), size=k, replace=False)
    specs = []
    for idx in chosen:
        kind = POOL[int(idx)]
        if kind == "bit_depth":
            params = {"bits": int(rng.integers(1, 8))}
        elif kind == "median_blur":
            params = {"window": int(rng.choice([3, 5]))}
        elif kind == "gaussian_blur":
            params = {"sigma": float(rng.uniform(0.5, 2.0))}
        elif kind == "additive_noise":
            params = {"sigma": float(rng.uniform(0.01, 0.05)), "noise_seed": int(rng.integers(2**63))}
        else:
            params = {"quality": int(rng.integers(10, 91))}
        specs.append(TransformSpec(kind, params))
    return specs


def apply_barrage(image: Image, config: DefenseConfig) -> Image:
    out = image
    for spec in sample_barrage(config):
        out = apply_transform(out, spec)
    return out


def rgb_to_ycbcr(pixels: np.ndarray) -> np.ndarray:
    return pixels @ _YCBCR.T


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return ycc @ _YCBCR_INV.T


def y_median_denoise(image: Image, window: int = 3) -> Image:
    """Median-filter the luma plane only (edge-replicate padding)."""
    if window not in (3, 5):
        raise ValueError("window must be 3 or 5")
    if image.channels == 1:
        return Image.clipped(_median(image.pixels, window))
    ycc = rgb_to_ycbcr(image.pixels)
    ycc[:, :, 0] = ndimage.median_filter(ycc[:, :, 0], size=window, mode="nearest")
    return Image.clipped(ycbcr_to_rgb(ycc))


def identity_defense(image: Image) -> Image:
    return image


def apply_defense(image: Image, config: DefenseConfig) -> Image:
    if config.kind == "identity":
        return image
    if config.kind == "ymedian":
        return y_median_denoise(image, config.window)
    return apply_barrage(image, config)
