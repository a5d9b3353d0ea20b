"""Detection-to-truth matching, the metric suite, and the Ki67 index.

Matching is greedy in ascending pair distance with deterministic index tie
breaks. Metrics are defined explicitly from the matched confusion matrix
plus the per-class missed-truth and false-detection counts: an unmatched
truth counts as a misclassification of its true class, an unmatched
detection as a false positive of its predicted class. Both macro and micro
averages are reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import CLASS_NAMES

METRICS_SCHEMA_VERSION = 1


@dataclass
class MatchResult:
    pairs: list  # (detection_index, truth_index, distance)
    unmatched_detections: list
    unmatched_truths: list

    @property
    def n_detections(self) -> int:
        return len(self.pairs) + len(self.unmatched_detections)

    @property
    def n_truths(self) -> int:
        return len(self.pairs) + len(self.unmatched_truths)


def match_detections(
    detections: np.ndarray, truths: np.ndarray, radius: float = 6.0
) -> MatchResult:
    """Greedy one-to-one matching within ``radius``.

    ``detections`` and ``truths`` are (n, 2) arrays of (x, y). Candidate
    pairs are visited in ascending distance, ties broken by (truth index,
    detection index).
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    det = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    tru = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    if det.shape[0] and tru.shape[0]:
        d2 = ((det[:, None, :] - tru[None, :, :]) ** 2).sum(axis=2)
        di, ti = np.nonzero(d2 <= radius**2)
        dist = np.sqrt(d2[di, ti])
        order = np.lexsort((di, ti, dist))
    else:
        di = ti = dist = np.empty(0)
        order = []
    det_used = np.zeros(det.shape[0], dtype=bool)
    tru_used = np.zeros(tru.shape[0], dtype=bool)
    pairs = []
    for k in order:
        d, t = int(di[k]), int(ti[k])
        if det_used[d] or tru_used[t]:
            continue
        det_used[d] = True
        tru_used[t] = True
        pairs.append((d, t, float(dist[k])))
    return MatchResult(
        pairs=pairs,
        unmatched_detections=[i for i in range(det.shape[0]) if not det_used[i]],
        unmatched_truths=[i for i in range(tru.shape[0]) if not tru_used[i]],
    )


def detection_f1(match: MatchResult) -> float:
    """2*TP / (2*TP + FP + FN) over positions, ignoring class labels."""
    tp = len(match.pairs)
    fp = len(match.unmatched_detections)
    fn = len(match.unmatched_truths)
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 1.0


@dataclass
class MetricsReport:
    """Per-class and averaged rates plus the confusion structures."""

    class_names: tuple
    confusion: np.ndarray  # (k, k) matched pairs, rows = truth class
    missed: np.ndarray  # (k,) unmatched truths per true class
    false_detections: np.ndarray  # (k,) unmatched detections per predicted class
    per_class: dict = field(default_factory=dict)
    macro: dict = field(default_factory=dict)
    micro: dict = field(default_factory=dict)
    overall_accuracy: float = 0.0  # correct / (truths + false detections)
    truth_accuracy: float = 0.0  # correctly classified truths / all truths
    matched_accuracy: float = 0.0  # diagonal / matched pairs
    ki67_index: float | None = None

    def to_json(self) -> str:
        doc = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "class_names": list(self.class_names),
            "confusion": self.confusion.astype(int).tolist(),
            "missed": self.missed.astype(int).tolist(),
            "false_detections": self.false_detections.astype(int).tolist(),
            "per_class": self.per_class,
            "macro": self.macro,
            "micro": self.micro,
            "overall_accuracy": self.overall_accuracy,
            "truth_accuracy": self.truth_accuracy,
            "matched_accuracy": self.matched_accuracy,
            "ki67_index": self.ki67_index,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        k = len(self.class_names)
        lines = ["confusion matrix (rows = truth, cols = predicted, last col = missed):"]
        for i in range(k):
            row = " ".join(f"{int(v):6d}" for v in self.confusion[i])
            lines.append(f"  {self.class_names[i]:<12} {row} | {int(self.missed[i]):6d}")
        lines.append(f"  false detections per class: {self.false_detections.astype(int).tolist()}")
        header = f"  {'class':<12} {'acc':>7} {'prec':>7} {'recall':>7} {'f1':>7} {'spec':>7} {'sens':>7}"
        lines.append(header)
        for name in self.class_names:
            m = self.per_class[name]
            lines.append(
                f"  {name:<12} {m['accuracy']:7.4f} {m['precision']:7.4f} "
                f"{m['recall']:7.4f} {m['f1']:7.4f} {m['specificity']:7.4f} {m['sensitivity']:7.4f}"
            )
        for tag, m in (("macro", self.macro), ("micro", self.micro)):
            lines.append(
                f"  {tag:<12} {m['accuracy']:7.4f} {m['precision']:7.4f} "
                f"{m['recall']:7.4f} {m['f1']:7.4f} {m['specificity']:7.4f} {m['sensitivity']:7.4f}"
            )
        lines.append(f"  overall accuracy: {self.overall_accuracy:.4f}")
        lines.append(f"  truth-level accuracy: {self.truth_accuracy:.4f}")
        lines.append(f"  matched-only accuracy: {self.matched_accuracy:.4f}")
        if self.ki67_index is not None:
            lines.append(f"  Ki67 index: {self.ki67_index:.2f}%")
        return "\n".join(lines) + "\n"


def _rates(tp: float, fp: float, fn: float, tn: float) -> dict:
    def safe(num, den):
        return float(num / den) if den > 0 else 0.0

    precision = safe(tp, tp + fp)
    recall = safe(tp, tp + fn)
    return {
        "accuracy": safe(tp + tn, tp + fp + fn + tn),
        "precision": precision,
        "recall": recall,
        "f1": safe(2 * precision * recall, precision + recall),
        "specificity": safe(tn, tn + fp),
        "sensitivity": recall,
    }


def compute_metrics(
    match: MatchResult,
    detection_labels,
    truth_labels,
    class_names: tuple = CLASS_NAMES,
    with_ki67: bool = True,
) -> MetricsReport:
    """Build the full report from a matching plus class labels.

    Labels are class names (strings) indexed per detection / truth list used
    in the matching.
    """
    index = {name: i for i, name in enumerate(class_names)}
    k = len(class_names)
    confusion = np.zeros((k, k), dtype=np.int64)
    for d, t, _ in match.pairs:
        confusion[index[truth_labels[t]], index[detection_labels[d]]] += 1
    missed = np.zeros(k, dtype=np.int64)
    for t in match.unmatched_truths:
        missed[index[truth_labels[t]]] += 1
    false_det = np.zeros(k, dtype=np.int64)
    for d in match.unmatched_detections:
        false_det[index[detection_labels[d]]] += 1

    row_sums = confusion.sum(axis=1) + missed
    n_truths = int(row_sums.sum())
    if n_truths == 0:
        raise ValueError("compute_metrics: empty truth set")
    universe = n_truths + int(false_det.sum())

    report = MetricsReport(
        class_names=class_names,
        confusion=confusion,
        missed=missed,
        false_detections=false_det,
    )
    tp_sum = fp_sum = fn_sum = tn_sum = 0
    for c, name in enumerate(class_names):
        tp = int(confusion[c, c])
        fn = int(confusion[c].sum() - tp + missed[c])
        fp = int(confusion[:, c].sum() - tp + false_det[c])
        tn = universe - tp - fn - fp
        report.per_class[name] = _rates(tp, fp, fn, tn)
        tp_sum += tp
        fp_sum += fp
        fn_sum += fn
        tn_sum += tn
    report.macro = {
        key: float(np.mean([report.per_class[n][key] for n in class_names]))
        for key in ("accuracy", "precision", "recall", "f1", "specificity", "sensitivity")
    }
    report.micro = _rates(tp_sum, fp_sum, fn_sum, tn_sum)
    diag = int(np.trace(confusion))
    report.overall_accuracy = diag / universe
    report.truth_accuracy = diag / n_truths
    report.matched_accuracy = diag / len(match.pairs) if match.pairs else 0.0

    if with_ki67:
        counts = {name: 0 for name in class_names}
        for d, _, _ in match.pairs:
            counts[detection_labels[d]] += 1
        for d in match.unmatched_detections:
            counts[detection_labels[d]] += 1
        pos, neg = counts.get("ki67_pos", 0), counts.get("ki67_neg", 0)
        report.ki67_index = ki67_index_from_counts(pos, neg) if pos + neg else None
    return report


def ki67_index_from_counts(positives: int, negatives: int) -> float:
    """100 * positives / (positives + negatives); stroma/lymphocytes excluded."""
    total = positives + negatives
    if total <= 0:
        raise ValueError("ki67 index undefined: no cancer cells")
    return 100.0 * positives / total


def ki67_index(labels) -> float:
    """Ki67 proliferation index from classified cell labels."""
    labels = list(labels)
    pos = sum(1 for v in labels if v == "ki67_pos")
    neg = sum(1 for v in labels if v == "ki67_neg")
    return ki67_index_from_counts(pos, neg)
