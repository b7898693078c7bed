"""
Image Output
PNG rendering of conductivity images and tiled mosaics
"""

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib
import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

DIVERGING_CMAP = "RdBu_r"
BACKGROUND = (255, 255, 255, 255)


def normalize_max_abs(image: np.ndarray) -> np.ndarray:
    """Divide by the image's own max |value|; an all-zero image stays zero"""
    image = np.asarray(image, dtype=np.float64)
    peak = float(np.max(np.abs(image), initial=0.0))
    return image / peak if peak > 0 else image.copy()


def mosaic(tiles: np.ndarray, pad: int = 1, fill: float = np.nan) -> np.ndarray:
    """Tile a (rows, cols, H, W) stack into one image with `pad` pixels of `fill` between tiles"""
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim == 3:
        tiles = tiles[None]
    if tiles.ndim != 4:
        raise ValueError(f"mosaic expects (rows, cols, H, W), got shape {tiles.shape}")
    rows, cols, h, w = tiles.shape
    out = np.full((rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad), fill)
    for i in range(rows):
        for j in range(cols):
            out[i * (h + pad) : i * (h + pad) + h, j * (w + pad) : j * (w + pad) + w] = tiles[i, j]
    return out


def to_rgba(
    image: np.ndarray, vmax: Optional[float] = None, cmap: str = DIVERGING_CMAP, mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Signed image to uint8 RGBA on a symmetric diverging scale; NaN and masked-out pixels are background"""
    image = np.asarray(image, dtype=np.float64)
    finite = np.isfinite(image)
    if vmax is None:
        vmax = float(np.max(np.abs(image[finite]), initial=0.0)) or 1.0
    scaled = np.clip(0.5 + 0.5 * np.where(finite, image, 0.0) / vmax, 0.0, 1.0)
    rgba = (matplotlib.colormaps[cmap](scaled) * 255).round().astype(np.uint8)
    hidden = ~finite if mask is None else (~finite | ~np.asarray(mask, dtype=bool))
    rgba[hidden] = BACKGROUND
    return rgba


def to_gray(
    image: np.ndarray,
    vmin: Optional[float] = None,
    vmax: Optional[float] = None,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Grayscale uint8 stretched over the visible pixels; NaN and masked-out pixels are black"""
    image = np.asarray(image, dtype=np.float64)
    visible = np.isfinite(image) if mask is None else (np.isfinite(image) & np.asarray(mask, dtype=bool))
    if visible.any():
        lo = float(image[visible].min()) if vmin is None else vmin
        hi = float(image[visible].max()) if vmax is None else vmax
    else:
        lo = 0.0 if vmin is None else vmin
        hi = 0.0 if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    gray = np.clip((np.where(visible, image, lo) - lo) / span, 0.0, 1.0)
    gray[~visible] = 0.0
    return (gray * 255).round().astype(np.uint8)


def save_png(
    path: Union[str, Path],
    image: np.ndarray,
    signed: bool = True,
    vmax: Optional[float] = None,
    mask: Optional[np.ndarray] = None,
    scale: int = 1,
) -> Path:
    """Write a diverging-color (signed) or grayscale PNG, optionally upscaled by nearest neighbour"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if signed:
        picture = Image.fromarray(to_rgba(image, vmax=vmax, mask=mask))
    else:
        picture = Image.fromarray(to_gray(image, vmax=vmax, mask=mask))
    if scale > 1:
        picture = picture.resize((picture.width * scale, picture.height * scale), Image.Resampling.NEAREST)
    picture.save(path)
    logger.debug(f"Wrote {path}")
    return path


def save_mosaic(
    path: Union[str, Path], tiles: Union[np.ndarray, Sequence[Sequence[np.ndarray]]], scale: int = 4, pad: int = 1
) -> Path:
    """Mosaic of signed tiles on one shared symmetric color scale"""
    board = mosaic(np.asarray(tiles, dtype=np.float64), pad=pad)
    return save_png(path, board, signed=True, scale=scale)
