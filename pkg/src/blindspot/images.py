"""PNG image I/O and synthetic texture generation.

Images are carried internally as float32 (C, H, W) arrays in [0, 1];
files may be 8- or 16-bit grayscale or RGB PNG. Values are clamped only
when written.
"""

from pathlib import Path

import cv2
import numpy as np

from .errors import InputError, ParameterError

_EXTENSIONS = (".png",)


def load_image(path):
    """Read a PNG as float32 (C, H, W) in [0, 1]; C is 1 or 3."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise InputError(f"{path}: unsupported sample type {raw.dtype}")
    arr = raw.astype(np.float32) / np.float32(scale)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        arr = arr[:, :, :3][:, :, ::-1]  # BGR(A) -> RGB
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    raise InputError(f"{path}: unsupported channel layout {raw.shape}")


def save_image(path, image, bit_depth=8):
    """Write float32 (C, H, W) or (H, W) to PNG, clamping to [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ParameterError(f"expected (C,H,W) with C in (1,3), got {image.shape}")
    if bit_depth == 8:
        quant, dtype = 255.0, np.uint8
    elif bit_depth == 16:
        quant, dtype = 65535.0, np.uint16
    else:
        raise ParameterError(f"bit_depth must be 8 or 16, got {bit_depth}")
    scaled = np.rint(np.clip(image, 0.0, 1.0) * quant).astype(dtype)
    if scaled.shape[0] == 1:
        pixels = scaled[0]
    else:
        pixels = np.ascontiguousarray(scaled.transpose(1, 2, 0)[:, :, ::-1])  # RGB -> BGR
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), pixels):
        raise InputError(f"cannot write image {path}")


def quantize(image, bit_depth=16):
    """Round-trip values through the PNG sample grid without touching disk."""
    quant = 255.0 if bit_depth == 8 else 65535.0
    arr = np.rint(np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0) * quant)
    return (arr / np.float32(quant)).astype(np.float32)


def load_folder(folder):
    """Load every PNG in a directory, sorted by name; returns (name, array) pairs."""
    folder = Path(folder)
    if not folder.is_dir():
        raise InputError(f"{folder} is not a directory")
    pairs = []
    for path in sorted(folder.iterdir()):
        if path.suffix.lower() in _EXTENSIONS:
            pairs.append((path.name, load_image(path)))
    if not pairs:
        raise InputError(f"no PNG images found in {folder}")
    return pairs


def make_texture(side, seed, channels=1):
    """Smooth synthetic texture in [0.1, 0.9]: mixed sinusoids plus soft blobs.

    Band-limited content that a small blind-spot model can learn from its
    neighborhood; used for toy training runs and tests.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    planes = []
    for _ in range(channels):
        field = np.zeros((side, side))
        for _ in range(6):
            freq = rng.uniform(0.02, 0.11)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.4, 1.0)
            field += amp * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                                  + phase)
        for _ in range(3):
            cy, cx = rng.uniform(0, side, 2)
            width = rng.uniform(side / 8, side / 3)
            amp = rng.uniform(-1.0, 1.0)
            field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        lo, hi = field.min(), field.max()
        planes.append((field - lo) / (hi - lo) * 0.8 + 0.1)
    return np.stack(planes).astype(np.float32)
