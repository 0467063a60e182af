"""
Image View - Pixmap grids for human inspection
Writes and reads binary P6 portable pixmaps through QImage. Raw float
tensors are written next to every grid for exact comparisons.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np
from PyQt6.QtGui import QImage

from unicontrol_desk.models.errors import DatasetError, ShapeError
from unicontrol_desk.models.records import save_tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
GRID_PADDING = 1


def to_uint8(images: np.ndarray, value_range: str = "signed") -> np.ndarray:
    """
    Channel-first floats to channel-last bytes.

    Args:
        images: (..., 3, H, W) array
        value_range: "signed" for [-1, 1] images, "unit" for [0, 1] conditions
    """
    x = np.asarray(images, dtype=np.float64)
    if value_range == "signed":
        x = (x + 1.0) / 2.0
    elif value_range != "unit":
        raise ValueError(f"unknown value range: {value_range!r}")
    x = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.moveaxis(x, -3, -1)


def make_grid(images: np.ndarray, columns: int = 8, value_range: str = "signed") -> np.ndarray:
    """
    Tile (N, 3, S, S) images into one (H, W, 3) uint8 canvas.

    Tiles are separated by a black padding line.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError("make_grid", images.shape, ("N", 3, "S", "S"))
    n, _, h, w = images.shape
    columns = max(1, min(columns, n))
    rows = (n + columns - 1) // columns
    pad = GRID_PADDING
    canvas = np.zeros((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), dtype=np.uint8)
    tiles = to_uint8(images, value_range)
    for index, tile in enumerate(tiles):
        r, c = divmod(index, columns)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        canvas[top : top + h, left : left + w] = tile
    return canvas


def save_ppm(path: PathLike, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as a binary P6 pixmap."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError("save_ppm", rgb.shape, ("H", "W", 3), detail=str(rgb.dtype))
    h, w, _ = rgb.shape
    data = np.ascontiguousarray(rgb).tobytes()
    image = QImage(data, w, h, 3 * w, QImage.Format.Format_RGB888).copy()
    if not image.save(str(path), "PPM"):
        raise DatasetError("cannot write pixmap", path)
    logger.debug("wrote %dx%d pixmap %s", w, h, path)


def load_ppm(path: PathLike) -> np.ndarray:
    """Read a pixmap back as an (H, W, 3) uint8 array."""
    image = QImage()
    if not image.load(str(path)):
        raise DatasetError("cannot read pixmap", path)
    image = image.convertToFormat(QImage.Format.Format_RGB888)
    h, w, stride = image.height(), image.width(), image.bytesPerLine()
    bits = image.constBits()
    bits.setsize(image.sizeInBytes())
    raw = np.frombuffer(bits, dtype=np.uint8).reshape(h, stride)
    return raw[:, : 3 * w].reshape(h, w, 3).copy()


def save_images(
    path: PathLike, images: np.ndarray, columns: int = 8, value_range: str = "signed"
) -> Path:
    """
    Write ``images`` as a pixmap grid at ``path`` plus the raw tensor at
    ``path`` with suffix ``.tensor``.

    Returns:
        Path of the raw tensor file
    """
    path = Path(path)
    save_ppm(path, make_grid(images, columns, value_range))
    raw = path.with_suffix(".tensor")
    save_tensor(raw, np.asarray(images, dtype=np.float32))
    logger.info("wrote %d images to %s", len(images), path)
    return raw
