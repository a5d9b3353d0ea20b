"""Four-way classification of detected nucleus centers.

Each detection is classified from its 51x51 neighborhood (reflection-padded
at tile borders). A compact patch CNN (three conv/pool stages, global average
pooling, softmax) sees the RGB patch plus a constant auxiliary channel
holding the detector's center probability, tying classification to the
segmentation evidence at that pixel. Training augments with the 8 dihedral
orientations (flips, mirrors, and their transposes).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import CLASS_NAMES, CenterConfig
from .detector import Detection
from .nn import (
    NonFiniteError,
    SgdState,
    ShapeMismatchError,
    conv_backward,
    conv_forward,
    conv_layer,
    cross_entropy,
    global_avg_pool,
    global_avg_pool_backward,
    load_records,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    save_records,
    sgd_step,
    softmax,
)

log = logging.getLogger("sdcs.center")


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range index back into [0, n) without edge repeat."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


@dataclass
class CenterPatch:
    """Fixed-size window centered on a detection, with provenance."""

    pixels: np.ndarray  # (size, size, 3) uint8
    center: tuple[int, int]
    image_id: str = ""


def extract_patch(tile: np.ndarray, center: tuple[int, int], size: int = 51) -> CenterPatch:
    """Window centered at (x, y); out-of-tile area is reflection-padded."""
    h, w = tile.shape[:2]
    x, y = center
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"center ({x}, {y}) outside {w}x{h} tile")
    half = size // 2
    rows = np.array([reflect_index(y + dy, h) for dy in range(-half, half + 1)])
    cols = np.array([reflect_index(x + dx, w) for dx in range(-half, half + 1)])
    return CenterPatch(pixels=tile[np.ix_(rows, cols)], center=(x, y))


def augment(patch: np.ndarray) -> list[np.ndarray]:
    """All 8 dihedral orientations of an HWC patch (each an involution's
    worth of flips/mirrors plus their transposes)."""
    t = patch.transpose(1, 0, 2) if patch.ndim == 3 else patch.T
    variants = [
        patch,
        patch[:, ::-1],
        patch[::-1, :],
        patch[::-1, ::-1],
        t,
        t[:, ::-1],
        t[::-1, :],
        t[::-1, ::-1],
    ]
    return [np.ascontiguousarray(v) for v in variants]


@dataclass
class ClassPrediction:
    probs: np.ndarray  # (4,), sums to 1
    label: str
    confidence: float


@dataclass
class CenterSample:
    """Training record: patch pixels, center probability, class index."""

    pixels: np.ndarray  # (size, size, 3) uint8
    probability: float
    label: int


class CenterClassifier:
    """Compact patch CNN: [conv3x3 -> relu -> pool] x3 -> gap -> conv1x1."""

    def __init__(self, config: CenterConfig, convs, final):
        self.config = config
        self.convs = convs
        self.final = final

    @classmethod
    def initialize(cls, config: CenterConfig, seed: int) -> "CenterClassifier":
        rng = np.random.default_rng(seed)
        convs = []
        c_in = config.in_channels
        for i, width in enumerate(config.conv_widths):
            convs.append(conv_layer(c_in, width, 3, rng, name=f"center.conv{i}"))
            c_in = width
        final = conv_layer(c_in, config.num_classes, 1, rng, name="center.final")
        return cls(config, convs, final)

    def parameters(self):
        out = []
        for p in [*self.convs, self.final]:
            out.extend([p.weight, p.bias])
        return out

    def zero_grads(self):
        for t in self.parameters():
            t.zero_grad()

    def save(self, path) -> None:
        records = []
        for i, p in enumerate(self.convs):
            records.append((f"center.conv{i}:{p.kind}.w", p.weight.data))
            records.append((f"center.conv{i}:{p.kind}.b", p.bias.data))
        records.append((f"center.final:{self.final.kind}.w", self.final.weight.data))
        records.append((f"center.final:{self.final.kind}.b", self.final.bias.data))
        save_records(path, records)

    @classmethod
    def load(cls, path, config: CenterConfig) -> "CenterClassifier":
        loaded = dict(load_records(path))
        model = cls.initialize(config, seed=0)
        names = [f"center.conv{i}" for i in range(len(model.convs))] + ["center.final"]
        layers = [*model.convs, model.final]
        for name, p in zip(names, layers):
            for role, tensor in (("w", p.weight), ("b", p.bias)):
                tag = f"{name}:{p.kind}.{role}"
                if tag not in loaded:
                    raise ShapeMismatchError(f"center weights missing record {tag!r}")
                if loaded[tag].shape != tensor.data.shape:
                    raise ShapeMismatchError(
                        f"record {tag!r} shape {loaded[tag].shape} != "
                        f"expected {tensor.data.shape}"
                    )
                tensor.data = loaded[tag].copy()
        return model

    # -- input assembly -----------------------------------------------------

    def to_input(self, pixels: np.ndarray, probability: float) -> np.ndarray:
        """Reflect-pad the HWC patch to ``pad_to`` and stack channels CHW."""
        size = self.config.patch_size
        if pixels.shape[:2] != (size, size):
            raise ShapeMismatchError(
                f"patch is {pixels.shape[:2]}, expected ({size}, {size})"
            )
        pad = self.config.pad_to - size
        lo, hi = pad // 2, pad - pad // 2
        padded = np.pad(pixels, ((lo, hi), (lo, hi), (0, 0)), mode="reflect")
        x = padded.astype(np.float32) / 255.0 - 0.5
        chw = x.transpose(2, 0, 1)
        if self.config.use_probability_channel:
            aux = np.full(
                (1, self.config.pad_to, self.config.pad_to),
                np.float32(probability) - np.float32(0.5),
                dtype=np.float32,
            )
            chw = np.concatenate([chw, aux], axis=0)
        return np.ascontiguousarray(chw)

    # -- forward / backward --------------------------------------------------

    def _forward(self, x: np.ndarray, keep_caches: bool):
        caches = []
        cur = x
        for p in self.convs:
            pre = conv_forward(cur, p)
            post = relu(pre)
            pooled, idx = maxpool2x2(post)
            caches.append((cur, pre, post.shape, idx) if keep_caches else None)
            cur = pooled
        pooled_shape = cur.shape
        g = global_avg_pool(cur)
        logits = conv_forward(g, self.final)[:, :, 0, 0]
        return logits, (caches, pooled_shape, g)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(x, keep_caches=False)[0]

    def predict_batch(self, inputs: np.ndarray) -> np.ndarray:
        """(N, C, P, P) inputs -> (N, 4) probabilities."""
        return softmax(self.logits(inputs), axis=1)

    def train_step(
        self,
        inputs: np.ndarray,
        labels: np.ndarray,
        class_weights: np.ndarray,
        state: SgdState,
    ) -> tuple[float, float]:
        self.zero_grads()
        logits, (caches, pooled_shape, g) = self._forward(inputs, keep_caches=True)
        loss, dlogits = cross_entropy(logits, labels, class_weights)
        acc = float((logits.argmax(axis=1) == labels).mean())
        dg_in, gw, gb = conv_backward(g, self.final, dlogits[:, :, None, None])
        self.final.weight.add_grad(gw)
        self.final.bias.add_grad(gb)
        cur = global_avg_pool_backward(pooled_shape, dg_in)
        for p, cache in zip(reversed(self.convs), reversed(caches)):
            x_in, pre, post_shape, idx = cache
            unpooled = maxpool2x2_backward(idx, post_shape, cur)
            g_pre = relu_backward(pre, unpooled)
            gx, gw, gb = conv_backward(x_in, p, g_pre)
            p.weight.add_grad(gw)
            p.bias.add_grad(gb)
            cur = gx
        sgd_step(self.parameters(), state)
        return loss, acc


def train_center_classifier(
    samples: list[CenterSample],
    config: CenterConfig,
    seed: int,
) -> tuple[CenterClassifier, list[tuple[int, float, float]]]:
    """Train the 4-way center classifier with dihedral augmentation.

    Each sample is shown in one random orientation per epoch. Deterministic
    for a fixed seed; a dataset with fewer than two classes is rejected.
    """
    labels = np.array([s.label for s in samples], dtype=np.intp)
    if len(np.unique(labels)) < 2:
        raise ValueError(
            f"degenerate training set: {len(np.unique(labels))} distinct class(es), need >= 2"
        )
    model = CenterClassifier.initialize(config, seed)
    state = SgdState(config.learning_rate, config.momentum)
    counts = np.bincount(labels, minlength=config.num_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(config.num_classes)
    weights[present] = counts[present].sum() / (present.sum() * counts[present])
    rng = np.random.default_rng(seed + 1)

    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        orientation = rng.integers(0, 8, size=len(samples))
        losses, accs = [], []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            xs = []
            for i in batch:
                pix = augment(samples[i].pixels)[orientation[i]]
                xs.append(model.to_input(pix, samples[i].probability))
            try:
                loss, acc = model.train_step(
                    np.stack(xs), labels[batch], weights, state
                )
            except NonFiniteError as err:
                raise NonFiniteError(f"center training diverged at epoch {epoch}: {err}") from err
            losses.append(loss)
            accs.append(acc)
        history.append((epoch, float(np.mean(losses)), float(np.mean(accs))))
        log.debug("center epoch %d loss %.4f acc %.4f", epoch, history[-1][1], history[-1][2])
    return model, history


def classify_center(
    tile: np.ndarray,
    detection: Detection,
    model: CenterClassifier,
    image_id: str = "",
) -> ClassPrediction:
    """Deterministic 4-way distribution for one detection."""
    patch = extract_patch(tile, (detection.x, detection.y), model.config.patch_size)
    x = model.to_input(patch.pixels, detection.score)[None]
    probs = model.predict_batch(x)[0]
    idx = int(probs.argmax())
    return ClassPrediction(probs=probs, label=CLASS_NAMES[idx], confidence=float(probs[idx]))


def classify_detections(
    tile: np.ndarray,
    detections: list[Detection],
    model: CenterClassifier,
    batch_size: int = 64,
) -> list[Detection]:
    """Fill each detection's class label; returns new Detection records."""
    out = []
    for start in range(0, len(detections), batch_size):
        chunk = detections[start : start + batch_size]
        xs = [
            model.to_input(
                extract_patch(tile, (d.x, d.y), model.config.patch_size).pixels,
                d.score,
            )
            for d in chunk
        ]
        probs = model.predict_batch(np.stack(xs))
        for d, p in zip(chunk, probs):
            out.append(
                Detection(x=d.x, y=d.y, score=d.score, label=CLASS_NAMES[int(p.argmax())])
            )
    return out
