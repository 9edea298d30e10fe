"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import os
from numbers import Real
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

ImageLike = Union[Image.Image, np.ndarray, str, os.PathLike]


def load_image(path: str | os.PathLike) -> Image.Image:
    """Open an image file fully into memory and return it as RGB."""
    with Image.open(path) as im:
        im.load()
        return _to_rgb(im)


def _to_rgb(im: Image.Image) -> Image.Image:
    if im.mode == "RGB":
        return im.copy()
    if im.mode in ("RGBA", "LA", "P"):
        rgba = im.convert("RGBA")
        bg = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
        return Image.alpha_composite(bg, rgba).convert("RGB")
    return im.convert("RGB")


def check_image(image: ImageLike) -> Image.Image:
    """Return a fresh RGB ``PIL.Image`` from a path, array or image.

    The returned image never aliases the input, so callers may draw on it.
    """
    if isinstance(image, (str, os.PathLike)):
        try:
            return load_image(image)
        except (FileNotFoundError, UnidentifiedImageError) as exc:
            raise ValueError(f"cannot read image {image!s}: {exc}") from exc
    if isinstance(image, np.ndarray):
        arr = image
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        if arr.ndim != 3 or arr.shape[2] not in (3, 4):
            raise ValueError(f"expected HxW, HxWx3 or HxWx4 array, got shape {image.shape}")
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
        return _to_rgb(Image.fromarray(np.ascontiguousarray(arr)))
    if isinstance(image, Image.Image):
        return _to_rgb(image)
    raise TypeError(f"unsupported image type {type(image).__name__}")


def check_raster(raster, *, allow_color: bool = True) -> np.ndarray:
    """Coerce to a float64 array of shape (H, W) or (H, W, C)."""
    if isinstance(raster, Image.Image):
        raster = np.asarray(raster)
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim == 3 and not allow_color:
        raise ValueError("expected a single-channel raster")
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected 2-D or 3-D raster, got {arr.ndim}-D")
    return arr


def check_positive(name: str, value, *, strict: bool = True) -> None:
    if not isinstance(value, Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    if strict and not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
