"""Tile-level nucleus detection.

Overlapping patch windows are predicted by the segmentation network and
averaged into a tile-wide per-class probability map; nucleus centers are the
thresholded local maxima of the foreground probability, greedily suppressed
so no two detections fall within ``min_distance`` of each other.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DetectorConfig
from .nn import ShapeMismatchError


@dataclass
class Detection:
    """One detected nucleus center in tile coordinates."""

    x: int
    y: int
    score: float
    label: str = "unassigned"


@dataclass
class ProbabilityMap:
    """Per-class probability planes plus the window-coverage count plane."""

    planes: np.ndarray  # (num_classes, H, W), normalized to [0, 1]
    counts: np.ndarray  # (H, W), >= 1 wherever any window covered the pixel

    def foreground(self) -> np.ndarray:
        return self.planes[1:].sum(axis=0)


def window_starts(extent: int, window: int, stride: int) -> list[int]:
    """Window origins along one axis; the last window clamps to the edge."""
    if extent < window:
        raise ShapeMismatchError(f"tile extent {extent} smaller than window {window}")
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def aggregate_windows(
    tile: np.ndarray,
    predict_patch,
    config: DetectorConfig,
) -> ProbabilityMap:
    """Mean per-pixel class probabilities over all covering windows.

    ``predict_patch`` maps a (window, window, 3) uint8 patch to a
    (num_classes, window, window) probability array. Windows are visited in
    fixed row-major order; sums are accumulated in float64 so the result is
    independent of window order to rounding noise.
    """
    h, w = tile.shape[:2]
    win = config.window
    ys = window_starts(h, win, config.stride)
    xs = window_starts(w, win, config.stride)
    acc = None
    counts = np.zeros((h, w), dtype=np.float64)
    for y0 in ys:
        for x0 in xs:
            probs = predict_patch(tile[y0 : y0 + win, x0 : x0 + win])
            if acc is None:
                acc = np.zeros((probs.shape[0], h, w), dtype=np.float64)
            acc[:, y0 : y0 + win, x0 : x0 + win] += probs
            counts[y0 : y0 + win, x0 : x0 + win] += 1.0
    planes = (acc / counts[None, :, :]).astype(np.float32)
    return ProbabilityMap(planes=planes, counts=counts)


def find_local_maxima(
    plane: np.ndarray, threshold: float, min_distance: int
) -> list[Detection]:
    """Greedy thresholded peak picking.

    Candidates at or above ``threshold`` are visited in descending-score
    order (ties by ascending y, then x) and accepted only when every
    previously accepted point is at least ``min_distance`` away (Euclidean).
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold {threshold} must lie in (0, 1)")
    if min_distance < 1:
        raise ValueError(f"min_distance {min_distance} must be >= 1")
    ys, xs = np.nonzero(plane >= threshold)
    if ys.size == 0:
        return []
    scores = plane[ys, xs]
    order = np.lexsort((xs, ys, -scores.astype(np.float64)))
    ys, xs, scores = ys[order], xs[order], scores[order]

    # bucket accepted points on a min_distance grid: only 3x3 neighboring
    # cells can hold a conflicting point
    cell = int(min_distance)
    buckets: dict[tuple[int, int], list[tuple[int, int]]] = {}
    d2 = float(min_distance) ** 2
    out: list[Detection] = []
    for y, x, s in zip(ys.tolist(), xs.tolist(), scores.tolist()):
        cy, cx = y // cell, x // cell
        ok = True
        for by in range(cy - 1, cy + 2):
            for bx in range(cx - 1, cx + 2):
                for py, px in buckets.get((by, bx), ()):
                    if (py - y) ** 2 + (px - x) ** 2 < d2:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            out.append(Detection(x=int(x), y=int(y), score=float(s)))
            buckets.setdefault((cy, cx), []).append((y, x))
    return out


def detect_tile(
    tile: np.ndarray, predict_patch, config: DetectorConfig
) -> tuple[list[Detection], ProbabilityMap]:
    prob_map = aggregate_windows(tile, predict_patch, config)
    detections = find_local_maxima(
        prob_map.foreground(), config.threshold, config.min_distance
    )
    return detections, prob_map


# ---------------------------------------------------------------------------
# CSV + sidecar manifest
# ---------------------------------------------------------------------------

CSV_HEADER = ["x", "y", "score", "class_label"]


def write_detections_csv(
    path: str | Path,
    detections: list[Detection],
    image_id: str = "",
    tile_origin: tuple[int, int] = (0, 0),
) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for d in detections:
            writer.writerow([d.x, d.y, f"{d.score:.6f}", d.label])
    manifest = {"image": image_id, "tile_origin": list(tile_origin)}
    path.with_suffix(path.suffix + ".manifest.json").write_text(
        json.dumps(manifest, sort_keys=True) + "\n"
    )


def read_detections_csv(path: str | Path) -> list[Detection]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        return [
            Detection(x=int(row[0]), y=int(row[1]), score=float(row[2]), label=row[3])
            for row in reader
        ]
