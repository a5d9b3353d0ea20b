"""Optical-density color deconvolution for hematoxylin/DAB stains.

Uses the standard Ruifrok-Johnston H-DAB unit vectors by default; the matrix
is a parameter so other stain pairs can be configured. RGB and OD are related
by ``rgb = 256 * exp(-od) - 1`` elementwise, making a pure white pixel
exactly zero optical density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# rows: stain OD vectors in RGB space (unit length)
HEMATOXYLIN_VECTOR = np.array([0.650, 0.704, 0.286])
DAB_VECTOR = np.array([0.268, 0.570, 0.776])


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def hdab_stain_matrix() -> np.ndarray:
    """3x3 matrix whose rows are hematoxylin, DAB, and their residual axis."""
    h = _unit(HEMATOXYLIN_VECTOR)
    d = _unit(DAB_VECTOR)
    residual = _unit(np.cross(h, d))
    return np.stack([h, d, residual])


def od_from_rgb(rgb: np.ndarray) -> np.ndarray:
    """Per-channel optical density; white (255) maps to exactly 0."""
    v = rgb.astype(np.float64)
    return -np.log((v + 1.0) / 256.0)


def rgb_from_od(od: np.ndarray) -> np.ndarray:
    """Inverse of :func:`od_from_rgb`, rounded to uint8."""
    v = 256.0 * np.exp(-np.asarray(od, dtype=np.float64)) - 1.0
    return np.clip(np.round(v), 0, 255).astype(np.uint8)


@dataclass
class StainChannels:
    """Gray plane, per-stain OD planes, and the original RGB tile."""

    gray: np.ndarray  # (H, W) float32, 0..255 luminance
    hematoxylin: np.ndarray  # (H, W) float32, OD units, >= 0
    dab: np.ndarray  # (H, W) float32, OD units, >= 0
    rgb: np.ndarray  # (H, W, 3) uint8


def stain_deconvolve(rgb: np.ndarray, stain_matrix: np.ndarray | None = None) -> StainChannels:
    """Split an RGB tile into gray luminance and per-stain OD planes.

    The OD image is projected onto the stain basis by inverting the stain
    matrix; tiny negative concentrations from rounding are clamped to 0.
    """
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB, got {rgb.shape}")
    m = hdab_stain_matrix() if stain_matrix is None else np.asarray(stain_matrix, dtype=np.float64)
    inv = np.linalg.inv(m)
    od = od_from_rgb(rgb)
    concentrations = od @ inv  # (H, W, 3) stain amounts
    concentrations = np.maximum(concentrations, 0.0)
    gray = rgb.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return StainChannels(
        gray=gray.astype(np.float32),
        hematoxylin=concentrations[:, :, 0].astype(np.float32),
        dab=concentrations[:, :, 1].astype(np.float32),
        rgb=rgb,
    )
