"""Batch orchestration: dataset synthesis, the three training stages,
detection, classification, evaluation, scoring, overlays, and threshold
calibration.

Every command is a plain function over a :class:`PipelineConfig` plus
directories; the CLI is a thin argparse wrapper. Commands write a provenance
record (config digest, seed, library versions) next to their artifacts and
refuse to overwrite existing outputs unless forced. All randomness derives
from the master seed through stable per-purpose child seeds, so a repeated
run is bitwise identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .annotations import AnnotationSet
from .center import (
    CenterClassifier,
    CenterSample,
    classify_detections,
    train_center_classifier,
)
from .classical import (
    feature_vector,
    features_to_csv,
    grid_search_svm,
    load_svm,
    normalize_features,
    save_svm,
    segment_nuclei,
    stain_deconvolve,
    svm_predict,
)
from .config import (
    CLASS_INDEX,
    CLASS_NAMES,
    PipelineConfig,
    config_digest,
    save_config,
)
from .detector import (
    Detection,
    detect_tile,
    find_local_maxima,
    read_detections_csv,
    write_detections_csv,
)
from .evaluation import (
    MatchResult,
    compute_metrics,
    detection_f1,
    ki67_index,
    match_detections,
)
from .network import (
    SdcsNetwork,
    TrainingPatch,
    build_training_mask,
    history_to_csv,
    train_sdcs,
)
from .synthetic import generate_tile
from .tiling import tissue_mask

log = logging.getLogger("sdcs.pipeline")

ROLES = ("train", "val", "test")


class PipelineError(RuntimeError):
    """Missing inputs, refused overwrites, and other actionable failures."""


def child_seed(master: int, tag: str) -> int:
    """Stable 32-bit child seed for one purpose string."""
    digest = hashlib.blake2s(f"{master}:{tag}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def _require_absent(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise PipelineError(f"{path} already exists; pass --force to overwrite")


def _require_present(path: Path, what: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {what}: {path}")
    return path


def save_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return arr


def write_provenance(out_dir: Path, command: str, cfg: PipelineConfig) -> None:
    import scipy

    record = {
        "command": command,
        "config_sha256": config_digest(cfg),
        "seed": cfg.seed,
        "versions": {
            "sdcs": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    prov_dir = out_dir / "provenance"
    prov_dir.mkdir(parents=True, exist_ok=True)
    (prov_dir / f"{command}.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n"
    )


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def synth_dataset(cfg: PipelineConfig, out_dir: Path, force: bool = False) -> dict:
    """Generate the train/val/test tile datasets with exact ground truth."""
    out_dir = Path(out_dir)
    counts = {
        "train": cfg.dataset.train_tiles,
        "val": cfg.dataset.val_tiles,
        "test": cfg.dataset.test_tiles,
    }
    produced: dict[str, list[str]] = {}
    for role in ROLES:
        role_dir = out_dir / "tiles" / role
        _require_absent(role_dir, force)
    for role in ROLES:
        role_dir = out_dir / "tiles" / role
        role_dir.mkdir(parents=True, exist_ok=True)
        ids = []
        for i in range(counts[role]):
            tile_id = f"{role}_{i:03d}"
            seed = child_seed(cfg.seed, f"tile:{role}:{i}")
            tile, truth = generate_tile(cfg.scene, seed)
            save_png(role_dir / f"{tile_id}.png", tile)
            annot = AnnotationSet(
                image_id=tile_id,
                cells=[(c.x, c.y, c.class_name) for c in truth],
            )
            annot.save(role_dir / f"{tile_id}.json")
            ids.append(tile_id)
        produced[role] = ids
    save_config(cfg, out_dir / "config.txt")
    write_provenance(out_dir, "synth", cfg)
    log.info("synthesized %s", {k: len(v) for k, v in produced.items()})
    return produced


def load_role_tiles(data_dir: Path, role: str) -> list[tuple[str, np.ndarray, AnnotationSet]]:
    role_dir = _require_present(Path(data_dir) / "tiles" / role, f"{role} tiles")
    out = []
    for png in sorted(role_dir.glob("*.png")):
        annot_path = _require_present(png.with_suffix(".json"), "annotation file")
        out.append((png.stem, load_image(png), AnnotationSet.load(annot_path)))
    if not out:
        raise PipelineError(f"no tiles found under {role_dir}")
    return out


# ---------------------------------------------------------------------------
# segmentation-network training
# ---------------------------------------------------------------------------

def build_sdcs_training_pairs(
    tiles: list[tuple[str, np.ndarray, AnnotationSet]], cfg: PipelineConfig
) -> list[TrainingPatch]:
    """Patches centered on annotated cells (jittered) plus background patches."""
    patch = cfg.sdcs.patch_size
    half = patch // 2
    pairs = []
    for tile_id, tile, annot in tiles:
        h, w = tile.shape[:2]
        rng = np.random.default_rng(child_seed(cfg.seed, f"patches:{tile_id}"))
        n_total = cfg.sdcs_train.patches_per_tile
        n_background = int(round(n_total * cfg.sdcs_train.background_patch_fraction))
        n_cells = n_total - n_background
        cells = list(annot.cells)
        order = rng.permutation(len(cells)) if cells else []
        origins = []
        for k in range(n_cells):
            if not cells:
                break
            x, y, _ = cells[order[k % len(cells)]]
            jx, jy = rng.integers(-cfg.sdcs_train.center_jitter, cfg.sdcs_train.center_jitter + 1, 2)
            x0 = int(np.clip(x - half + jx, 0, w - patch))
            y0 = int(np.clip(y - half + jy, 0, h - patch))
            origins.append((x0, y0))
        for _ in range(n_total - len(origins)):
            origins.append(
                (int(rng.integers(0, w - patch + 1)), int(rng.integers(0, h - patch + 1)))
            )
        for k, (x0, y0) in enumerate(origins):
            local = [
                (x - x0, y - y0, cls)
                for x, y, cls in annot.cells
                if x0 <= x < x0 + patch and y0 <= y < y0 + patch
            ]
            mask_rng = np.random.default_rng(child_seed(cfg.seed, f"mask:{tile_id}:{k}"))
            xy, labels = build_training_mask(local, patch, cfg.sdcs, mask_rng)
            pairs.append(
                TrainingPatch(
                    image=tile[y0 : y0 + patch, x0 : x0 + patch],
                    sample_xy=xy,
                    sample_labels=labels,
                )
            )
    return pairs


def train_sdcs_command(
    cfg: PipelineConfig, data_dir: Path, out_dir: Path, force: bool = False
) -> Path:
    out_dir = Path(out_dir)
    weights_path = out_dir / "models" / "sdcs.weights"
    _require_absent(weights_path, force)
    tiles = load_role_tiles(data_dir, "train")
    pairs = build_sdcs_training_pairs(tiles, cfg)
    network, history = train_sdcs(
        pairs, cfg.sdcs, cfg.sdcs_train, seed=child_seed(cfg.seed, "sdcs-train")
    )
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    network.save(weights_path)
    (out_dir / "models" / "sdcs_loss.csv").write_text(history_to_csv(history))
    write_provenance(out_dir, "train-sdcs", cfg)
    log.info("sdcs training final loss %.4f acc %.4f", history[-1][1], history[-1][2])
    return weights_path


def _load_network(cfg: PipelineConfig, out_dir: Path) -> SdcsNetwork:
    path = _require_present(
        Path(out_dir) / "models" / "sdcs.weights", "segmentation network weights"
    )
    return SdcsNetwork.load(path, cfg.sdcs)


# ---------------------------------------------------------------------------
# center-classifier training
# ---------------------------------------------------------------------------

def _foreground_map(network: SdcsNetwork, tile: np.ndarray, cfg: PipelineConfig):
    from .detector import aggregate_windows

    prob_map = aggregate_windows(
        tile, lambda patch: network.predict_mask(patch).probs, cfg.detector
    )
    return prob_map


def train_center_command(
    cfg: PipelineConfig, data_dir: Path, out_dir: Path, force: bool = False
) -> Path:
    out_dir = Path(out_dir)
    weights_path = out_dir / "models" / "center.weights"
    _require_absent(weights_path, force)
    network = _load_network(cfg, out_dir)
    from .center import extract_patch

    samples = []
    for tile_id, tile, annot in load_role_tiles(data_dir, "train"):
        fg = _foreground_map(network, tile, cfg).foreground()
        for x, y, cls in annot.cells:
            patch = extract_patch(tile, (int(x), int(y)), cfg.center.patch_size)
            samples.append(
                CenterSample(
                    pixels=patch.pixels,
                    probability=float(fg[int(y), int(x)]),
                    label=CLASS_INDEX[cls],
                )
            )
    model, history = train_center_classifier(
        samples, cfg.center, seed=child_seed(cfg.seed, "center-train")
    )
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(weights_path)
    (out_dir / "models" / "center_loss.csv").write_text(history_to_csv(history))
    write_provenance(out_dir, "train-center", cfg)
    log.info("center training final acc %.4f", history[-1][2])
    return weights_path


# ---------------------------------------------------------------------------
# SVM baseline training
# ---------------------------------------------------------------------------

def _labeled_nucleus_features(
    tiles: list[tuple[str, np.ndarray, AnnotationSet]], match_radius: float
) -> tuple[np.ndarray, np.ndarray]:
    """Segment each tile and label nuclei by their nearest annotation."""
    rows, labels = [], []
    for _, tile, annot in tiles:
        channels = stain_deconvolve(tile)
        nuclei = segment_nuclei(channels)
        if not nuclei or not annot.cells:
            continue
        points = np.array(annot.points(), dtype=np.float64)
        names = annot.labels()
        for nucleus in nuclei:
            cx, cy = nucleus.centroid
            d2 = ((points[:, 0] - cx) ** 2 + (points[:, 1] - cy) ** 2)
            j = int(np.argmin(d2))
            if d2[j] <= match_radius**2:
                rows.append(feature_vector(channels, nucleus))
                labels.append(CLASS_INDEX[names[j]])
    if not rows:
        raise PipelineError("no segmented nuclei matched any annotation")
    return np.array(rows), np.array(labels)


def train_svm_command(
    cfg: PipelineConfig, data_dir: Path, out_dir: Path, force: bool = False
) -> Path:
    out_dir = Path(out_dir)
    model_path = out_dir / "models" / "svm.model"
    _require_absent(model_path, force)
    radius = cfg.evaluation.match_radius
    train_x, train_y = _labeled_nucleus_features(load_role_tiles(data_dir, "train"), radius)
    val_x, val_y = _labeled_nucleus_features(load_role_tiles(data_dir, "val"), radius)
    normed, means, stds = normalize_features(train_x)
    model, grid = grid_search_svm(
        normed,
        train_y,
        val_x,
        val_y,
        cfg.svm.c_grid,
        cfg.svm.gamma_grid,
        tol=cfg.svm.tolerance,
        max_iterations=cfg.svm.max_iterations,
        means=means,
        stds=stds,
    )
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_svm(model, model_path)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    (features_dir / "train_features.csv").write_text(features_to_csv(train_x, train_y))
    grid_lines = ["c,gamma,val_accuracy"] + [f"{c},{g},{a:.6f}" for c, g, a in grid]
    (features_dir / "svm_grid.csv").write_text("\n".join(grid_lines) + "\n")
    write_provenance(out_dir, "train-svm", cfg)
    log.info("svm grid best C=%g gamma=%g", model.c, model.gamma)
    return model_path


# ---------------------------------------------------------------------------
# detect / classify
# ---------------------------------------------------------------------------

def _mask_filter(tile: np.ndarray, detections: list[Detection], cfg: PipelineConfig):
    mask, fraction = tissue_mask(tile, cfg.tiling)
    kept = [d for d in detections if mask[d.y, d.x]]
    return kept, fraction


def detect_command(
    cfg: PipelineConfig,
    data_dir: Path,
    out_dir: Path,
    role: str = "test",
    method: str = "sdcs",
    force: bool = False,
) -> Path:
    out_dir = Path(out_dir)
    det_dir = out_dir / "detections" / role
    _require_absent(det_dir, force)
    if method == "sdcs":
        if cfg.detector.window != cfg.sdcs.patch_size:
            raise PipelineError(
                f"detector window {cfg.detector.window} must equal "
                f"network patch size {cfg.sdcs.patch_size}"
            )
        network = _load_network(cfg, out_dir)
        predict = lambda patch: network.predict_mask(patch).probs  # noqa: E731
    elif method != "classical":
        raise PipelineError(f"unknown detection method {method!r}")
    det_dir.mkdir(parents=True, exist_ok=True)
    for tile_id, tile, _ in load_role_tiles(data_dir, role):
        if method == "sdcs":
            detections, _ = detect_tile(tile, predict, cfg.detector)
        else:
            nuclei = segment_nuclei(stain_deconvolve(tile))
            detections = [
                Detection(x=int(round(n.centroid[0])), y=int(round(n.centroid[1])), score=1.0)
                for n in nuclei
            ]
        detections, _ = _mask_filter(tile, detections, cfg)
        write_detections_csv(det_dir / f"{tile_id}.csv", detections, image_id=tile_id)
    write_provenance(out_dir, "detect", cfg)
    return det_dir


def classify_command(
    cfg: PipelineConfig,
    data_dir: Path,
    out_dir: Path,
    role: str = "test",
    method: str = "sdcs",
    force: bool = False,
) -> Path:
    out_dir = Path(out_dir)
    det_dir = _require_present(out_dir / "detections" / role, "detections directory")
    cls_dir = out_dir / "classified" / role
    _require_absent(cls_dir, force)
    if method == "sdcs":
        center_path = _require_present(
            out_dir / "models" / "center.weights", "center classifier weights"
        )
        model = CenterClassifier.load(center_path, cfg.center)
    elif method == "classical":
        svm_path = _require_present(out_dir / "models" / "svm.model", "SVM model")
        svm_model = load_svm(svm_path)
    else:
        raise PipelineError(f"unknown classify method {method!r}")
    cls_dir.mkdir(parents=True, exist_ok=True)
    for tile_id, tile, _ in load_role_tiles(data_dir, role):
        csv_path = _require_present(det_dir / f"{tile_id}.csv", "detections CSV")
        detections = read_detections_csv(csv_path)
        if method == "sdcs":
            classified = classify_detections(tile, detections, model)
        else:
            classified = _classify_classical(tile, detections, svm_model)
        write_detections_csv(cls_dir / f"{tile_id}.csv", classified, image_id=tile_id)
    write_provenance(out_dir, "classify", cfg)
    return cls_dir


def _classify_classical(tile, detections, svm_model, attach_radius: float = 3.0):
    """Re-segment (deterministic), map detections to nuclei, SVM-label them."""
    channels = stain_deconvolve(tile)
    nuclei = segment_nuclei(channels)
    out = []
    if nuclei:
        centroids = np.array([n.centroid for n in nuclei])
        feats = {}
        for d in detections:
            d2 = ((centroids[:, 0] - d.x) ** 2 + (centroids[:, 1] - d.y) ** 2)
            j = int(np.argmin(d2))
            if d2[j] <= attach_radius**2:
                if j not in feats:
                    feats[j] = feature_vector(channels, nuclei[j])
                label_idx = int(svm_predict(svm_model, feats[j][None])[0])
                out.append(Detection(d.x, d.y, d.score, CLASS_NAMES[label_idx]))
            else:
                out.append(Detection(d.x, d.y, d.score, d.label))
    else:
        out = list(detections)
    return out


# ---------------------------------------------------------------------------
# evaluate / score / overlay / calibrate
# ---------------------------------------------------------------------------

def evaluate_tiles(
    per_tile: list[tuple[list[Detection], AnnotationSet]], match_radius: float
):
    """Pool per-tile greedy matchings into one report."""
    pairs, unmatched_d, unmatched_t = [], [], []
    det_labels, truth_labels = [], []
    d_off = t_off = 0
    for detections, annot in per_tile:
        det_xy = np.array([[d.x, d.y] for d in detections], dtype=np.float64).reshape(-1, 2)
        tru_xy = np.array(annot.points(), dtype=np.float64).reshape(-1, 2)
        m = match_detections(det_xy, tru_xy, match_radius)
        pairs.extend((d + d_off, t + t_off, dist) for d, t, dist in m.pairs)
        unmatched_d.extend(d + d_off for d in m.unmatched_detections)
        unmatched_t.extend(t + t_off for t in m.unmatched_truths)
        det_labels.extend(d.label for d in detections)
        truth_labels.extend(annot.labels())
        d_off += len(detections)
        t_off += len(annot.cells)
    match = MatchResult(pairs, unmatched_d, unmatched_t)
    report = compute_metrics(match, det_labels, truth_labels)
    return report, match


def evaluate_command(
    cfg: PipelineConfig,
    data_dir: Path,
    out_dir: Path,
    role: str = "test",
    detections_subdir: str = "classified",
    force: bool = False,
) -> Path:
    out_dir = Path(out_dir)
    metrics_path = out_dir / "metrics" / f"{role}_metrics.json"
    _require_absent(metrics_path, force)
    cls_dir = _require_present(out_dir / detections_subdir / role, "classified detections")
    tiles = load_role_tiles(data_dir, role)
    per_tile = []
    for tile_id, _, annot in tiles:
        csv_path = _require_present(cls_dir / f"{tile_id}.csv", "detections CSV")
        per_tile.append((read_detections_csv(csv_path), annot))
    report, match = evaluate_tiles(per_tile, cfg.evaluation.match_radius)
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    metrics_path.write_text(report.to_json())
    metrics_path.with_suffix(".txt").write_text(
        f"detection F1: {detection_f1(match):.4f}\n" + report.to_text()
    )
    write_provenance(out_dir, "evaluate", cfg)
    return metrics_path


def score_command(
    cfg: PipelineConfig,
    data_dir: Path,
    out_dir: Path,
    role: str = "test",
    force: bool = False,
) -> Path:
    out_dir = Path(out_dir)
    score_path = out_dir / "metrics" / f"{role}_ki67.json"
    _require_absent(score_path, force)
    cls_dir = _require_present(out_dir / "classified" / role, "classified detections")
    scores = {}
    for tile_id, _, _ in load_role_tiles(data_dir, role):
        detections = read_detections_csv(
            _require_present(cls_dir / f"{tile_id}.csv", "detections CSV")
        )
        labels = [d.label for d in detections]
        try:
            scores[tile_id] = round(ki67_index(labels), 2)
        except ValueError:
            log.warning("%s: no cancer cells classified; Ki67 undefined", tile_id)
            scores[tile_id] = None
    score_path.parent.mkdir(parents=True, exist_ok=True)
    score_path.write_text(json.dumps(scores, sort_keys=True, indent=2) + "\n")
    write_provenance(out_dir, "score", cfg)
    return score_path


OVERLAY_COLORS = {
    "ki67_pos": (255, 40, 40),
    "ki67_neg": (40, 200, 40),
    "lymphocyte": (60, 90, 255),
    "stroma": (255, 220, 0),
    "unassigned": (150, 150, 150),
}


def draw_marker(image: np.ndarray, x: int, y: int, color, radius: int = 6) -> None:
    h, w = image.shape[:2]
    y0, y1 = max(y - radius - 1, 0), min(y + radius + 2, h)
    x0, x1 = max(x - radius - 1, 0), min(x + radius + 2, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dist = np.sqrt((yy - y) ** 2 + (xx - x) ** 2)
    ring = (dist >= radius - 1.0) & (dist <= radius + 0.5)
    image[y0:y1, x0:x1][ring] = color


def overlay_command(
    cfg: PipelineConfig,
    data_dir: Path,
    out_dir: Path,
    role: str = "test",
    force: bool = False,
) -> Path:
    out_dir = Path(out_dir)
    ov_dir = out_dir / "overlays" / role
    _require_absent(ov_dir, force)
    cls_dir = _require_present(out_dir / "classified" / role, "classified detections")
    ov_dir.mkdir(parents=True, exist_ok=True)
    for tile_id, tile, _ in load_role_tiles(data_dir, role):
        detections = read_detections_csv(
            _require_present(cls_dir / f"{tile_id}.csv", "detections CSV")
        )
        canvas = tile.copy()
        for d in detections:
            draw_marker(canvas, d.x, d.y, OVERLAY_COLORS.get(d.label, (0, 0, 0)))
        save_png(ov_dir / f"{tile_id}.png", canvas)
    write_provenance(out_dir, "overlay", cfg)
    return ov_dir


def calibrate_command(
    cfg: PipelineConfig,
    data_dir: Path,
    out_dir: Path,
    thresholds=None,
    force: bool = False,
) -> Path:
    """Sweep detection thresholds on the validation tiles, report F1 each."""
    out_dir = Path(out_dir)
    calib_path = out_dir / "metrics" / "calibration.csv"
    _require_absent(calib_path, force)
    if thresholds is None:
        thresholds = [round(t, 2) for t in np.arange(0.2, 0.91, 0.05)]
    network = _load_network(cfg, out_dir)
    tiles = load_role_tiles(data_dir, "val")
    maps = []
    for tile_id, tile, annot in tiles:
        fg = _foreground_map(network, tile, cfg).foreground()
        maps.append((fg, annot))
    rows = []
    for t in thresholds:
        f1s = []
        for fg, annot in maps:
            detections = find_local_maxima(fg, t, cfg.detector.min_distance)
            det_xy = np.array([[d.x, d.y] for d in detections]).reshape(-1, 2)
            m = match_detections(
                det_xy, np.array(annot.points(), dtype=np.float64), cfg.evaluation.match_radius
            )
            f1s.append(detection_f1(m))
        rows.append((t, float(np.mean(f1s))))
    calib_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["threshold,detection_f1"] + [f"{t:.2f},{f:.6f}" for t, f in rows]
    calib_path.write_text("\n".join(lines) + "\n")
    best = max(rows, key=lambda r: r[1])
    log.info("best threshold %.2f (F1 %.4f)", best[0], best[1])
    write_provenance(out_dir, "calibrate", cfg)
    return calib_path
