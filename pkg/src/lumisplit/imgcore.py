"""Pixel containers and per-pixel image algebra shared by every other module.

Images are plain ``numpy`` arrays laid out ``H x W x C`` (float64 in the
physics pipeline). The validators below enforce the container invariants
where a contract needs them; everything else is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEUTRAL = np.full(3, 1.0 / 3.0)
SIMPLEX_TOL = 1e-5

DEFAULT_CHROM_EPS = 1e-6
DEFAULT_MASK_TAU = 0.02
DEFAULT_LEVELS = 3


class ImageError(ValueError):
    pass


class PyramidTooDeep(ImageError):
    pass


def as_linear_image(img, copy: bool = False) -> np.ndarray:
    """Validate an H x W x 3 non-negative finite raster and return it as float64."""
    arr = np.array(img, dtype=np.float64, copy=copy)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"expected H x W x 3 image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageError("image must have at least one pixel")
    if not np.all(np.isfinite(arr)):
        raise ImageError("image contains non-finite values")
    if np.any(arr < 0):
        raise ImageError("image contains negative values")
    return arr


def is_chromaticity_map(arr: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        return False
    return bool(np.all(arr >= 0) and np.all(np.abs(arr.sum(axis=2) - 1.0) <= tol))


def check_chromaticity_map(arr, tol: float = SIMPLEX_TOL) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not is_chromaticity_map(arr, tol):
        raise ImageError("array is not a per-pixel chromaticity map")
    return arr


def chromaticity(img, eps: float = DEFAULT_CHROM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Normalise each pixel to unit channel sum.

    Pixels whose channel sum is below ``eps`` get the neutral value
    (1/3, 1/3, 1/3) and are marked invalid in the returned mask.
    """
    if eps <= 0:
        raise ImageError("eps must be positive")
    img = np.asarray(img, dtype=np.float64)
    total = img.sum(axis=2)
    valid = total >= eps
    out = np.empty_like(img)
    out[valid] = img[valid] / total[valid][:, None]
    out[~valid] = NEUTRAL
    return out, valid


def valid_mask(img, tau: float = DEFAULT_MASK_TAU) -> np.ndarray:
    """Pixels whose brightest channel reaches ``tau``."""
    if tau < 0:
        raise ImageError("tau must be non-negative")
    return np.asarray(img).max(axis=2) >= tau


def grad_fd(img) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences along columns (gx) and rows (gy).

    The last column of gx and the last row of gy are zero. Works on
    H x W or H x W x C arrays.
    """
    img = np.asarray(img)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return gx, gy


def grad_fd_adjoint(gx_bar, gy_bar) -> np.ndarray:
    """Transpose of :func:`grad_fd` applied to a pair of cotangents."""
    gx_bar = np.asarray(gx_bar)
    gy_bar = np.asarray(gy_bar)
    out = np.zeros(np.broadcast_shapes(gx_bar.shape, gy_bar.shape), dtype=np.result_type(gx_bar, gy_bar))
    out[:, 1:] += gx_bar[:, :-1]
    out[:, :-1] -= gx_bar[:, :-1]
    out[1:, :] += gy_bar[:-1, :]
    out[:-1, :] -= gy_bar[:-1, :]
    return out


def _block_counts(h: int, w: int) -> np.ndarray:
    ry = np.full((h + 1) // 2, 2.0)
    rx = np.full((w + 1) // 2, 2.0)
    if h % 2:
        ry[-1] = 1.0
    if w % 2:
        rx[-1] = 1.0
    return np.outer(ry, rx)


def _pad_even(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    pad = [(0, h % 2), (0, w % 2)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad) if (h % 2 or w % 2) else img


def downsample_avg2(img) -> np.ndarray:
    """Non-overlapping 2x2 mean pooling; odd edges average the leftover 2x1/1x2/1x1 block."""
    img = np.asarray(img)
    if img.dtype.kind != "f":
        img = img.astype(np.float64)
    h, w = img.shape[:2]
    padded = _pad_even(img)
    hh, ww = padded.shape[:2]
    blocks = padded.reshape(hh // 2, 2, ww // 2, 2, *img.shape[2:])
    sums = blocks.sum(axis=(1, 3))
    counts = _block_counts(h, w)
    return sums / counts.reshape(counts.shape + (1,) * (img.ndim - 2))


def downsample_avg2_adjoint(g, shape: tuple[int, ...]) -> np.ndarray:
    """Transpose of :func:`downsample_avg2` for an input of ``shape``."""
    g = np.asarray(g)
    h, w = shape[:2]
    counts = _block_counts(h, w)
    g = g / counts.reshape(counts.shape + (1,) * (g.ndim - 2))
    up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    return up[:h, :w]


def downsample_mask(mask) -> np.ndarray:
    """A pooled pixel is valid only if every source pixel in its block is valid."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    padded = np.pad(mask, [(0, h % 2), (0, w % 2)], constant_values=True)
    blocks = padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2)
    return blocks.all(axis=(1, 3))


@dataclass(frozen=True)
class Pyramid:
    levels: list[np.ndarray]
    masks: list[np.ndarray] | None = None

    @property
    def depth(self) -> int:
        return len(self.levels)


def max_pyramid_depth(h: int, w: int) -> int:
    return int(np.floor(np.log2(min(h, w)))) + 1


def build_pyramid(img, levels: int = DEFAULT_LEVELS, mask=None) -> Pyramid:
    if levels < 1:
        raise ImageError("pyramid needs at least one level")
    img = np.asarray(img)
    h, w = img.shape[:2]
    if levels > max_pyramid_depth(h, w):
        raise PyramidTooDeep(f"pyramid too deep: {levels} levels for a {h}x{w} image")
    out = [img]
    masks = None if mask is None else [np.asarray(mask, dtype=bool)]
    for _ in range(levels - 1):
        out.append(downsample_avg2(out[-1]))
        if masks is not None:
            masks.append(downsample_mask(masks[-1]))
    return Pyramid(out, masks)


@dataclass(frozen=True)
class ValidMask:
    bits: np.ndarray
    count: int = field(init=False)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "count", int(bits.sum()))


# sRGB transfer (IEC 61966-2-1)
def srgb_to_linear(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v):
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, None)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * np.power(v, 1.0 / 2.4) - 0.055)
