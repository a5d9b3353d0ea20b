"""The 101-element handcrafted nucleus descriptor.

Layout, in order:
    [ 0: 26)  Haralick texture: 13 statistics on the gray channel window,
              then the same 13 on the hematoxylin OD window. GLCMs use 32
              gray levels, distance 1, and the four symmetric offsets
              (0/45/90/135 degrees) averaged before the statistics.
    [26: 75)  49 Zernike moment magnitudes of the binary mask, all (n, m)
              with n <= 12, m >= 0, n - m even, ordered by (n, m).
    [75: 86)  11 shape features: mean and std of centroid-to-perimeter
              distance, area, major/minor axis, eccentricity, orientation,
              first and second Hu moments, roundedness (4*pi*A/P^2), and
              perimeter.
    [86:101)  intensity statistics per RGB channel: mean, std, variance,
              skewness, excess kurtosis (population moments).

Degenerate inputs produce defined values instead of NaN: single-level GLCM
windows give ASM = IDM = 1 with zero dispersion terms, one-pixel masks give
zero spread/shape moments, and constant intensity regions give zero
skew/kurtosis.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from skimage.measure import perimeter as _weighted_perimeter

from .segment import SegmentedNucleus
from .stain import StainChannels

GLCM_LEVELS = 32
ZERNIKE_ORDER = 12

HARALICK_NAMES = [
    "asm",
    "contrast",
    "correlation",
    "variance",
    "inverse_difference_moment",
    "sum_average",
    "sum_variance",
    "sum_entropy",
    "entropy",
    "difference_variance",
    "difference_entropy",
    "imc1",
    "imc2",
]

NUCLEAR_NAMES = [
    "radial_mean",
    "radial_std",
    "area",
    "major_axis",
    "minor_axis",
    "eccentricity",
    "orientation",
    "hu1",
    "hu2",
    "roundedness",
    "perimeter",
]


def zernike_index_pairs(order: int = ZERNIKE_ORDER) -> list[tuple[int, int]]:
    """(n, m) with n <= order, m >= 0, n - m even; 49 pairs at order 12."""
    return [(n, m) for n in range(order + 1) for m in range(n % 2, n + 1, 2)]


FEATURE_NAMES = (
    [f"haralick_gray_{n}" for n in HARALICK_NAMES]
    + [f"haralick_hema_{n}" for n in HARALICK_NAMES]
    + [f"zernike_{n}_{m}" for n, m in zernike_index_pairs()]
    + [f"nuclear_{n}" for n in NUCLEAR_NAMES]
    + [
        f"intensity_{ch}_{stat}"
        for ch in ("r", "g", "b")
        for stat in ("mean", "std", "var", "skew", "kurt")
    ]
)
assert len(FEATURE_NAMES) == 101


# ---------------------------------------------------------------------------
# Haralick
# ---------------------------------------------------------------------------

def quantize_window(window: np.ndarray, mask: np.ndarray, levels: int = GLCM_LEVELS):
    """Min-max quantization of masked values to 0..levels-1."""
    vals = window[mask]
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        return np.zeros_like(window, dtype=np.intp), True
    q = np.floor((window - lo) / (hi - lo) * levels).astype(np.intp)
    return np.clip(q, 0, levels - 1), False


GLCM_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))  # 0, 45, 90, 135 degrees


def glcm(
    window: np.ndarray,
    mask: np.ndarray,
    offset: tuple[int, int],
    levels: int = GLCM_LEVELS,
) -> np.ndarray:
    """Symmetric, normalized co-occurrence matrix for one pixel offset.

    Only pairs whose both endpoints lie inside the mask are counted.
    """
    q, _ = quantize_window(window, mask, levels)
    dy, dx = offset
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    ys2, xs2 = ys + dy, xs + dx
    ok = (ys2 >= 0) & (ys2 < h) & (xs2 >= 0) & (xs2 < w)
    ys, xs, ys2, xs2 = ys[ok], xs[ok], ys2[ok], xs2[ok]
    ok = mask[ys2, xs2]
    a = q[ys[ok], xs[ok]]
    b = q[ys2[ok], xs2[ok]]
    m = np.zeros((levels, levels), dtype=np.float64)
    np.add.at(m, (a, b), 1.0)
    np.add.at(m, (b, a), 1.0)
    total = m.sum()
    if total == 0:
        # no in-mask pairs: treat as a single-symbol matrix
        m[0, 0] = 1.0
        return m
    return m / total


def haralick_statistics(p: np.ndarray) -> list[float]:
    """The 13 classical statistics of a normalized GLCM, fixed order."""
    levels = p.shape[0]
    idx = np.arange(levels, dtype=np.float64)
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mu_x = float(idx @ px)
    mu_y = float(idx @ py)
    var_x = float(((idx - mu_x) ** 2) @ px)
    var_y = float(((idx - mu_y) ** 2) @ py)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    diff = ii - jj

    def _entropy(q: np.ndarray) -> float:
        nz = q[q > 0]
        return float(-(nz * np.log(nz)).sum())

    asm = float((p**2).sum())
    contrast = float((diff**2 * p).sum())
    if var_x > 0 and var_y > 0:
        correlation = float(((ii * jj * p).sum() - mu_x * mu_y) / math.sqrt(var_x * var_y))
    else:
        correlation = 0.0
    variance = var_x
    idm = float((p / (1.0 + diff**2)).sum())

    # p_{x+y}: distribution of i + j (0 .. 2L-2)
    p_sum = np.zeros(2 * levels - 1)
    np.add.at(p_sum, (ii + jj).astype(np.intp).ravel(), p.ravel())
    k_sum = np.arange(2 * levels - 1, dtype=np.float64)
    sum_average = float(k_sum @ p_sum)
    sum_variance = float(((k_sum - sum_average) ** 2) @ p_sum)
    sum_entropy = _entropy(p_sum)

    # p_{x-y}: distribution of |i - j| (0 .. L-1)
    p_diff = np.zeros(levels)
    np.add.at(p_diff, np.abs(diff).astype(np.intp).ravel(), p.ravel())
    k_diff = np.arange(levels, dtype=np.float64)
    diff_mean = float(k_diff @ p_diff)
    difference_variance = float(((k_diff - diff_mean) ** 2) @ p_diff)
    difference_entropy = _entropy(p_diff)

    hxy = _entropy(p)
    hx = _entropy(px)
    hy = _entropy(py)
    outer = np.outer(px, py)
    nz = (p > 0) & (outer > 0)
    hxy1 = float(-(p[nz] * np.log(outer[nz])).sum())
    nz2 = outer > 0
    hxy2 = float(-(outer[nz2] * np.log(outer[nz2])).sum())
    imc1 = (hxy - hxy1) / max(hx, hy) if max(hx, hy) > 0 else 0.0
    imc2 = math.sqrt(max(0.0, 1.0 - math.exp(-2.0 * (hxy2 - hxy))))

    return [
        asm,
        contrast,
        correlation,
        variance,
        idm,
        sum_average,
        sum_variance,
        sum_entropy,
        _entropy(p),
        difference_variance,
        difference_entropy,
        imc1,
        imc2,
    ]


def haralick_features(
    window: np.ndarray, mask: np.ndarray, levels: int = GLCM_LEVELS
) -> np.ndarray:
    """13 statistics of the offset-averaged GLCM of one channel window."""
    if mask.sum() < 2:
        raise ValueError(f"haralick_features: mask has {int(mask.sum())} pixels, need >= 2")
    mats = [glcm(window, mask, off, levels) for off in GLCM_OFFSETS]
    return np.array(haralick_statistics(np.mean(mats, axis=0)))


# ---------------------------------------------------------------------------
# Zernike
# ---------------------------------------------------------------------------

def _radial_coefficients(n: int, m: int) -> list[tuple[float, int]]:
    """(coefficient, power) terms of the radial polynomial R_nm."""
    terms = []
    for s in range((n - m) // 2 + 1):
        c = (
            (-1) ** s
            * math.factorial(n - s)
            / (
                math.factorial(s)
                * math.factorial((n + m) // 2 - s)
                * math.factorial((n - m) // 2 - s)
            )
        )
        terms.append((float(c), n - 2 * s))
    return terms


def zernike_features(mask: np.ndarray, order: int = ZERNIKE_ORDER) -> np.ndarray:
    """Rotation-invariant magnitudes |Z_nm| of the binary mask.

    The mask is translated to its centroid and scaled by the maximum radius
    so it sits on the unit disk; moments are mass-normalized:
    Z_nm = (n+1)/pi * mean over pixels of R_nm(rho) * exp(-i m theta).
    """
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("zernike_features: empty mask")
    pairs = zernike_index_pairs(order)
    cx, cy = xs.mean(), ys.mean()
    dx = xs - cx
    dy = ys - cy
    r = np.sqrt(dx**2 + dy**2)
    rmax = r.max()
    out = np.zeros(len(pairs))
    if rmax < 1e-12:
        out[0] = 1.0 / math.pi  # single pixel: only the constant term
        return out
    rho = r / rmax
    theta = np.arctan2(dy, dx)
    powers = {k: rho**k for k in range(order + 1)}
    for i, (n, m) in enumerate(pairs):
        radial = np.zeros_like(rho)
        for c, k in _radial_coefficients(n, m):
            radial += c * powers[k]
        z = (radial * np.exp(-1j * m * theta)).mean() * (n + 1) / math.pi
        out[i] = abs(z)
    return out


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def nuclear_features(mask: np.ndarray) -> np.ndarray:
    """The 11 shape quantities of a binary mask (see module docstring)."""
    ys, xs = np.nonzero(mask)
    area = ys.size
    if area < 5:
        raise ValueError(f"nuclear_features: mask has {area} pixels, need >= 5")
    cx, cy = xs.mean(), ys.mean()

    boundary = mask & ~ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(2, 1), border_value=0
    )
    bys, bxs = np.nonzero(boundary)
    radial = np.sqrt((bxs - cx) ** 2 + (bys - cy) ** 2)
    radial_mean = float(radial.mean())
    radial_std = float(radial.std())

    dx = xs - cx
    dy = ys - cy
    mu20 = float((dx**2).mean())
    mu02 = float((dy**2).mean())
    mu11 = float((dx * dy).mean())
    common = math.sqrt(max(0.0, (mu20 - mu02) ** 2 + 4.0 * mu11**2))
    lam1 = (mu20 + mu02 + common) / 2.0
    lam2 = (mu20 + mu02 - common) / 2.0
    major = 4.0 * math.sqrt(max(lam1, 0.0))
    minor = 4.0 * math.sqrt(max(lam2, 0.0))
    eccentricity = math.sqrt(1.0 - lam2 / lam1) if lam1 > 0 else 0.0
    orientation = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)

    # Hu moments of the binary mask (eta = mu_pq / mu00^(1+(p+q)/2))
    eta20 = mu20 / area
    eta02 = mu02 / area
    eta11 = mu11 / area
    hu1 = eta20 + eta02
    hu2 = (eta20 - eta02) ** 2 + 4.0 * eta11**2

    perim = float(_weighted_perimeter(mask))
    roundedness = 4.0 * math.pi * area / perim**2 if perim > 0 else 0.0

    return np.array(
        [
            radial_mean,
            radial_std,
            float(area),
            major,
            minor,
            eccentricity,
            orientation,
            hu1,
            hu2,
            roundedness,
            perim,
        ]
    )


# ---------------------------------------------------------------------------
# intensity
# ---------------------------------------------------------------------------

def intensity_features(rgb_window: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """mean/std/var/skew/kurt per RGB channel over the masked pixels.

    Population moments; skewness and excess kurtosis are defined as 0 when
    the variance vanishes.
    """
    if not mask.any():
        raise ValueError("intensity_features: empty mask")
    out = []
    for ch in range(3):
        vals = rgb_window[:, :, ch][mask].astype(np.float64)
        mean = vals.mean()
        centered = vals - mean
        var = float((centered**2).mean())
        std = math.sqrt(var)
        if var > 1e-24:
            skew = float((centered**3).mean()) / var**1.5
            kurt = float((centered**4).mean()) / var**2 - 3.0
        else:
            skew, kurt = 0.0, 0.0
        out.extend([float(mean), std, var, skew, kurt])
    return np.array(out)


# ---------------------------------------------------------------------------
# assembly & normalization
# ---------------------------------------------------------------------------

def feature_vector(
    channels: StainChannels, nucleus: SegmentedNucleus, window_pad: int = 2
) -> np.ndarray:
    """The full 101-element descriptor for one segmented nucleus."""
    shape = channels.gray.shape
    mask, (r0, c0, r1, c1) = nucleus.mask_window(pad=window_pad, shape=shape)
    gray_win = channels.gray[r0:r1, c0:c1]
    hema_win = channels.hematoxylin[r0:r1, c0:c1]
    rgb_win = channels.rgb[r0:r1, c0:c1]
    vec = np.concatenate(
        [
            haralick_features(gray_win, mask),
            haralick_features(hema_win, mask),
            zernike_features(mask),
            nuclear_features(mask),
            intensity_features(rgb_win, mask),
        ]
    )
    if vec.shape != (101,):
        raise AssertionError(f"feature vector length {vec.shape} != 101")
    if not np.all(np.isfinite(vec)):
        raise FloatingPointError("non-finite feature value")
    return vec


def normalize_features(train: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-score the training matrix; returns (normalized, means, stds).

    Zero-variance columns map to 0 and record std 0 so the same rule applies
    to test data.
    """
    if train.ndim != 2 or train.shape[0] < 2:
        raise ValueError(f"normalize_features: need >= 2 rows, got shape {train.shape}")
    means = train.mean(axis=0)
    stds = train.std(axis=0)
    return apply_normalization(means, stds, train), means, stds


def apply_normalization(means: np.ndarray, stds: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Normalize rows with training statistics only."""
    safe = np.where(stds > 0, stds, 1.0)
    out = (x - means) / safe
    return np.where(stds > 0, out, 0.0)


def features_to_csv(matrix: np.ndarray, labels=None) -> str:
    header = ",".join(FEATURE_NAMES) + (",label" if labels is not None else "")
    lines = [header]
    for i, row in enumerate(matrix):
        text = ",".join(f"{v:.9g}" for v in row)
        if labels is not None:
            text += f",{labels[i]}"
        lines.append(text)
    return "\n".join(lines) + "\n"
