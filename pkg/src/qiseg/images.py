"""Reading slices and masks from PNG or tensor files, writing PNG outputs."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import QisegError
from .tensor_core import io as tio


class InputError(QisegError):
    pass


def read_image(path) -> np.ndarray:
    """2-D float slice. PNGs are scaled to [0, 1]; tensor files are taken as is."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: file not found")
    try:
        if path.suffix == ".tensor":
            arr = np.asarray(tio.load(path), dtype=float)
        else:
            with Image.open(path) as im:
                raw = np.asarray(im.convert("L") if im.mode not in ("L", "I", "I;16", "F") else im)
            arr = raw.astype(float)
            if raw.dtype == np.uint8:
                arr /= 255.0
    except InputError:
        raise
    except Exception as exc:  # PIL and the tensor reader raise a zoo of types
        raise InputError(f"{path}: unreadable ({exc})") from exc
    if arr.ndim != 2:
        raise InputError(f"{path}: expected a 2-D slice, got shape {arr.shape}")
    return arr


def read_mask(path) -> np.ndarray:
    return (read_image(path) > 0).astype(np.uint8)


def write_mask_png(path, mask) -> Path:
    """1-bit PNG."""
    Image.fromarray(np.asarray(mask).astype(bool)).save(path)
    return Path(path)


def write_prob_png(path, prob) -> Path:
    """8-bit grayscale PNG, 0..1 mapped to 0..255."""
    arr = np.clip(np.rint(np.asarray(prob, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return Path(path)
