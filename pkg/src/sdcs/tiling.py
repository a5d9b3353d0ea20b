"""Grid tiling of large images and the tissue mask.

Tiles cover the source without gaps; the last row/column clamps to the image
edge so tiles always have the full requested size (source dims permitting)
and reassembly is lossless. The tissue mask drops background/coverslip
pixels: low saturation AND high luminance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TilingConfig


@dataclass
class TileManifest:
    image_id: str
    origin: tuple[int, int]  # (x, y)
    size: tuple[int, int]  # (w, h)
    tissue_fraction: float | None = None


def grid_origins(extent: int, tile: int) -> list[int]:
    """Tile origins along one axis, last clamped to the edge."""
    if extent <= tile:
        return [0]
    origins = list(range(0, extent - tile + 1, tile))
    if origins[-1] != extent - tile:
        origins.append(extent - tile)
    return origins


def tile_image(
    image: np.ndarray, tile_size: int = 2000, image_id: str = ""
) -> tuple[list[TileManifest], list[np.ndarray]]:
    """Split an image into a clamped grid of tiles."""
    if image.ndim < 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"tile_image: bad image shape {image.shape}")
    h, w = image.shape[:2]
    th, tw = min(tile_size, h), min(tile_size, w)
    manifests, tiles = [], []
    for y0 in grid_origins(h, th):
        for x0 in grid_origins(w, tw):
            manifests.append(TileManifest(image_id=image_id, origin=(x0, y0), size=(tw, th)))
            tiles.append(image[y0 : y0 + th, x0 : x0 + tw].copy())
    return manifests, tiles


def reassemble(
    manifests: list[TileManifest], tiles: list[np.ndarray], shape: tuple
) -> np.ndarray:
    """Rebuild the source image from its tiles (overlaps agree by construction)."""
    out = np.zeros(shape, dtype=tiles[0].dtype)
    for m, t in zip(manifests, tiles):
        x0, y0 = m.origin
        out[y0 : y0 + t.shape[0], x0 : x0 + t.shape[1]] = t
    return out


def tissue_mask(
    tile: np.ndarray, config: TilingConfig | None = None
) -> tuple[np.ndarray, float]:
    """Boolean tissue mask and tissue fraction for an RGB tile.

    A pixel is background/coverslip when its saturation is below the
    threshold AND its luminance is above the threshold; everything else
    counts as tissue.
    """
    cfg = config or TilingConfig()
    rgb = tile.astype(np.float64)
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    saturation = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-9), 0.0)
    luminance = rgb @ np.array([0.299, 0.587, 0.114])
    background = (saturation < cfg.saturation_threshold) & (
        luminance > cfg.luminance_threshold
    )
    mask = ~background
    return mask, float(mask.mean())
