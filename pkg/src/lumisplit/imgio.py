"""PFM / PNG reading and writing.

PFM is stored little-endian (scale -1.0), bottom row first, and is read
back verbatim. PNGs go through OpenCV so 16-bit RGB works; the caller
picks whether the stored code values are linear or sRGB encoded.
"""

from __future__ import annotations

import os
import re

import cv2
import numpy as np

from .imgcore import ImageError, linear_to_srgb, srgb_to_linear

TRANSFERS = ("linear", "srgb")


class ImageFormatError(ImageError):
    pass


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    # header is three whitespace-separated tokens after the magic
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if m is None:
        raise ImageFormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    width, height = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    payload = data[m.end():]
    if len(payload) < 4 * count:
        raise ImageFormatError(f"{path}: truncated PFM ({len(payload)} bytes for {width}x{height}x{channels})")
    arr = np.frombuffer(payload, dtype=dtype, count=count).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ImageFormatError(f"{path}: PFM contains NaN or Inf")
    arr = arr.reshape(height, width, channels)[::-1]
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.ascontiguousarray(arr)


def write_pfm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageFormatError(f"cannot store shape {img.shape} as PFM")
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("refusing to write NaN/Inf to PFM")
    h, w, c = img.shape
    header = f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)


def read_png(path, transfer: str = "linear") -> np.ndarray:
    if transfer not in TRANSFERS:
        raise ImageFormatError(f"unknown transfer {transfer!r}")
    raw = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"{path}: unreadable PNG")
    if raw.dtype == np.uint8:
        v = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        v = raw.astype(np.float64) / 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported PNG depth {raw.dtype}")
    if v.ndim == 2:
        v = np.repeat(v[:, :, None], 3, axis=2)
    elif v.shape[2] == 4:
        v = v[:, :, 2::-1]
    else:
        v = v[:, :, ::-1]
    if transfer == "srgb":
        v = srgb_to_linear(v)
    return np.ascontiguousarray(v)


def write_png(path, img, transfer: str = "linear", bits: int = 16) -> None:
    if transfer not in TRANSFERS:
        raise ImageFormatError(f"unknown transfer {transfer!r}")
    if bits not in (8, 16):
        raise ImageFormatError("PNG depth must be 8 or 16")
    v = np.asarray(img, dtype=np.float64)
    if v.ndim != 3 or v.shape[2] != 3:
        raise ImageFormatError(f"cannot store shape {v.shape} as RGB PNG")
    if transfer == "srgb":
        v = linear_to_srgb(v)
    top = 255 if bits == 8 else 65535
    q = np.rint(np.clip(v, 0.0, 1.0) * top).astype(np.uint8 if bits == 8 else np.uint16)
    if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(q[:, :, ::-1])):
        raise ImageFormatError(f"{path}: PNG write failed")


def read_mask(path) -> np.ndarray:
    raw = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"{path}: unreadable mask")
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    return raw > 127


def write_mask(path, mask) -> None:
    q = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    if not cv2.imwrite(os.fspath(path), q):
        raise ImageFormatError(f"{path}: mask write failed")


def load_image(path, transfer: str = "linear") -> np.ndarray:
    """Load a PFM (always linear) or an 8/16-bit PNG as a float64 linear image."""
    if transfer not in TRANSFERS:
        raise ImageFormatError(f"unknown transfer {transfer!r}")
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if ext == ".pfm":
        return read_pfm(path).astype(np.float64)
    if ext == ".png":
        return read_png(path, transfer)
    raise ImageFormatError(f"unsupported image format {ext!r}")


def save_image(path, img, transfer: str = "linear", bits: int = 16) -> None:
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".pfm":
        write_pfm(path, img)
    elif ext == ".png":
        write_png(path, img, transfer, bits)
    else:
        raise ImageFormatError(f"unsupported image format {ext!r}")
