"""Deterministic generator of Ki67-like tiles with exact ground truth.

Cells are painted in optical-density space along the hematoxylin/DAB stain
axes and converted to RGB at the end, so stain deconvolution on the rendered
tile behaves as on real stains. Four appearance models:

    ki67_pos    filled brown (DAB) ellipse with a soft radial edge
    ki67_neg    blue (hematoxylin) ellipse, optionally hollow (bright core)
    stroma      elongated faint-blue spindle, axis ratio >= 3
    lymphocyte  small dark-blue disk

Weak-stain mode scales a cell's stain down by a configured factor while
keeping it above the documented detectable floor; hollow mode suppresses the
core of negative nuclei to an annulus. Both exercise the failure modes the
classical baseline is expected to show.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import SceneConfig
from .classical.stain import DAB_VECTOR, HEMATOXYLIN_VECTOR, rgb_from_od

POSITIVE_HEMA_TINT = 0.15  # slight blue inside brown nuclei
_PLACEMENT_ATTEMPTS = 500


class PackingError(RuntimeError):
    """Could not place the configured cell count at the required spacing."""


@dataclass
class GroundTruthCell:
    x: int
    y: int
    class_name: str
    radius: float
    weak: bool = False
    hollow: bool = False


def _value_noise(rng: np.random.Generator, size: int, cell: int = 16) -> np.ndarray:
    """Smooth unit-variance-ish noise from a bilinearly upsampled coarse grid."""
    coarse = rng.standard_normal((size // cell + 2, size // cell + 2))
    pos = np.arange(size) / cell
    i0 = pos.astype(np.intp)
    frac = pos - i0
    top = coarse[i0][:, i0]
    bot = coarse[i0 + 1][:, i0]
    top2 = coarse[i0][:, i0 + 1]
    bot2 = coarse[i0 + 1][:, i0 + 1]
    fy = frac[:, None]
    fx = frac[None, :]
    return (
        (1 - fy) * ((1 - fx) * top + fx * top2) + fy * ((1 - fx) * bot + fx * bot2)
    )


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _paint_ellipse(
    plane_h: np.ndarray,
    plane_d: np.ndarray,
    center: tuple[int, int],
    axes: tuple[float, float],
    angle: float,
    od_h: float,
    od_d: float,
    softness: float,
    hollow_core: float | None,
) -> None:
    """Accumulate one cell's stain profile into the OD planes."""
    size = plane_h.shape[0]
    cx, cy = center
    a, b = axes
    reach = int(math.ceil(max(a, b) + softness + 1))
    x0, x1 = max(cx - reach, 0), min(cx + reach + 1, size)
    y0, y1 = max(cy - reach, 0), min(cy + reach + 1, size)
    xs = np.arange(x0, x1) - cx
    ys = np.arange(y0, y1) - cy
    gx, gy = np.meshgrid(xs, ys)
    ca, sa = math.cos(angle), math.sin(angle)
    u = (gx * ca + gy * sa) / a
    v = (-gx * sa + gy * ca) / b
    d = np.sqrt(u**2 + v**2)
    edge = min(a, b)
    profile = _smoothstep((1.0 - d) * edge / softness)
    if hollow_core is not None:
        ring = _smoothstep((d - 0.25) / 0.4)
        profile = profile * (hollow_core + (1.0 - hollow_core) * ring)
    plane_h[y0:y1, x0:x1] += od_h * profile
    plane_d[y0:y1, x0:x1] += od_d * profile


def generate_tile(
    config: SceneConfig, seed: int
) -> tuple[np.ndarray, list[GroundTruthCell]]:
    """Render one tile; pure function of (config, seed).

    Raises :class:`PackingError` when the cell count cannot be placed at the
    configured spacing within a bounded number of attempts.
    """
    rng = np.random.default_rng(seed)
    size = config.tile_size
    noise = _value_noise(rng, size) * config.background_texture_amplitude
    od_h = config.background_od * (1.0 + noise)
    od_d = 0.45 * config.background_od * (1.0 + noise)
    od_h = np.maximum(od_h, 0.0)
    od_d = np.maximum(od_d, 0.0)

    plan = (
        [("ki67_pos", config.ki67_pos_count)]
        + [("ki67_neg", config.ki67_neg_count)]
        + [("stroma", config.stroma_count)]
        + [("lymphocyte", config.lymphocyte_count)]
    )
    placed: list[tuple[int, int]] = []
    truth: list[GroundTruthCell] = []
    spacing2 = config.min_center_spacing**2

    for class_name, count in plan:
        for _ in range(count):
            if class_name == "lymphocyte":
                radius = rng.uniform(config.lymphocyte_radius_min, config.lymphocyte_radius_max)
                axes = (radius, radius * rng.uniform(0.9, 1.0))
            elif class_name == "stroma":
                length = rng.uniform(config.stroma_length_min, config.stroma_length_max)
                ratio = config.stroma_axis_ratio * rng.uniform(1.0, 1.25)
                axes = (length, length / ratio)
                radius = length
            else:
                radius = rng.uniform(config.nucleus_radius_min, config.nucleus_radius_max)
                axes = (radius, radius * rng.uniform(0.75, 1.0))
            angle = rng.uniform(0.0, math.pi)
            margin = int(math.ceil(max(axes) + config.edge_softness + 2)) + config.coverslip_border
            if 2 * margin >= size:
                raise PackingError(f"cell of reach {margin} cannot fit a {size} px tile")
            for attempt in range(_PLACEMENT_ATTEMPTS):
                cx = int(rng.integers(margin, size - margin))
                cy = int(rng.integers(margin, size - margin))
                if all((cx - px) ** 2 + (cy - py) ** 2 >= spacing2 for px, py in placed):
                    break
            else:
                raise PackingError(
                    f"could not place {class_name} #{len(placed)} at spacing "
                    f"{config.min_center_spacing} after {_PLACEMENT_ATTEMPTS} attempts"
                )
            placed.append((cx, cy))

            weak = False
            hollow = False
            if class_name == "ki67_pos":
                cd = rng.uniform(config.dab_od_min, config.dab_od_max)
                ch = POSITIVE_HEMA_TINT
                weak = bool(rng.random() < config.weak_stain_fraction)
            elif class_name == "ki67_neg":
                cd = 0.0
                ch = rng.uniform(config.hema_od_min, config.hema_od_max)
                weak = bool(rng.random() < config.weak_stain_fraction)
                hollow = bool(rng.random() < config.hollow_fraction)
            elif class_name == "lymphocyte":
                cd = 0.0
                ch = rng.uniform(config.hema_od_min, config.hema_od_max) * config.lymphocyte_od_scale
            else:  # stroma
                cd = 0.0
                ch = rng.uniform(config.hema_od_min, config.hema_od_max) * config.stroma_od_scale
            if weak:
                cd *= config.weak_stain_factor
                ch *= config.weak_stain_factor
                if class_name == "ki67_neg":
                    ch = max(ch, config.detectable_od_floor)
            _paint_ellipse(
                od_h,
                od_d,
                (cx, cy),
                axes,
                angle,
                ch,
                cd,
                config.edge_softness,
                config.hollow_core_scale if hollow else None,
            )
            truth.append(
                GroundTruthCell(
                    x=cx,
                    y=cy,
                    class_name=class_name,
                    radius=float(np.mean(axes)),
                    weak=weak,
                    hollow=hollow,
                )
            )

    od_rgb = od_h[:, :, None] * HEMATOXYLIN_VECTOR[None, None, :] + od_d[
        :, :, None
    ] * DAB_VECTOR[None, None, :]
    if config.coverslip_border > 0:
        b = config.coverslip_border
        border = np.ones((size, size), dtype=bool)
        border[b : size - b, b : size - b] = False
        od_rgb[border] = 0.0
    tile = rgb_from_od(od_rgb)
    return tile, truth


def tissue_area_fraction(config: SceneConfig) -> float:
    """Ground-truth tissue fraction implied by the coverslip border."""
    size = config.tile_size
    inner = max(size - 2 * config.coverslip_border, 0)
    return inner * inner / (size * size)


def split_dataset(items: list, fractions, seed: int) -> list[list]:
    """Disjoint, exhaustive, seed-deterministic partition at item granularity.

    Sizes are floor(n * fraction) with the remainder assigned to the earliest
    partitions.
    """
    if not items:
        raise ValueError("split_dataset: empty input")
    fr = np.asarray(fractions, dtype=np.float64)
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} must sum to 1")
    n = len(items)
    sizes = np.floor(fr * n).astype(int)
    remainder = n - sizes.sum()
    for i in range(remainder):
        sizes[i % len(sizes)] += 1
    order = np.random.default_rng(seed).permutation(n)
    out = []
    start = 0
    for s in sizes:
        out.append([items[i] for i in order[start : start + s]])
        start += s
    return out
