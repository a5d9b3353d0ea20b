"""Hypercolumn segmentation network.

A VGG-style trunk of 3x3 conv blocks with 2x2 max pooling between blocks.
Selected block outputs (post-ReLU, pre-pool) are bilinearly upsampled to the
patch resolution and concatenated channelwise into a per-pixel descriptor
stack; a two-hidden-layer perceptron of 1x1 convolutions maps each descriptor
to class probabilities. Training samples a sparse labeled subset of pixels
per patch; inference applies the same head densely at every pixel.

The dense path and the sparse path share one row-chunked matrix kernel so a
pixel's prediction is bitwise identical whichever path computes it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import SEG_BACKGROUND, SEG_CLASS_OF, SdcsConfig, SdcsTrainConfig
from .nn import (
    LayerParams,
    NonFiniteError,
    SgdState,
    ShapeMismatchError,
    Tensor,
    channel_concat,
    channel_concat_backward,
    conv_backward,
    conv_forward,
    conv_layer,
    cross_entropy,
    load_records,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    save_records,
    sgd_step,
    softmax,
    upsample_bilinear,
    upsample_bilinear_backward,
)

log = logging.getLogger("sdcs.network")

_ROW_CHUNK = 64


def normalize_patch(image: np.ndarray) -> np.ndarray:
    """uint8 HWC tile patch -> float32 CHW in [-0.5, 0.5]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError(f"expected (H, W, 3) image, got {image.shape}")
    x = image.astype(np.float32) / 255.0 - 0.5
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def _affine_rows(s: np.ndarray, w2d: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``s @ w2d.T + b`` computed in fixed 64-row GEMM calls.

    Row results are then independent of how many rows the caller batched
    together, which is what makes dense and sparse head evaluation agree
    bitwise.
    """
    n, c = s.shape
    out = np.empty((n, w2d.shape[0]), dtype=s.dtype)
    wt = np.ascontiguousarray(w2d.T)
    for start in range(0, n, _ROW_CHUNK):
        block = s[start : start + _ROW_CHUNK]
        rows = block.shape[0]
        if rows < _ROW_CHUNK:
            padded = np.zeros((_ROW_CHUNK, c), dtype=s.dtype)
            padded[:rows] = block
            out[start : start + rows] = (padded @ wt)[:rows]
        else:
            out[start : start + _ROW_CHUNK] = block @ wt
    out += b[None, :]
    return out


@dataclass
class HypercolumnStack:
    """Upsampled per-block activations for one patch, stacked channelwise."""

    planes: np.ndarray  # (total_channels, patch, patch)
    block_channels: dict  # ordered block index -> channel width

    def __post_init__(self):
        expected = sum(self.block_channels.values())
        if self.planes.shape[0] != expected:
            raise ShapeMismatchError(
                f"stack has {self.planes.shape[0]} planes but blocks "
                f"{self.block_channels} sum to {expected}"
            )

    @property
    def total_channels(self) -> int:
        return self.planes.shape[0]

    @property
    def patch_size(self) -> int:
        return self.planes.shape[1]


@dataclass
class SparseSampleSet:
    """Pixel coordinates, their descriptor fibers, and optional labels."""

    xy: np.ndarray  # (n, 2) int, (x, y)
    descriptors: np.ndarray  # (n, total_channels)
    labels: np.ndarray | None = None


@dataclass
class PixelPredictionMap:
    """Dense per-pixel class probabilities for one patch."""

    probs: np.ndarray  # (num_classes, patch, patch), rows sum to 1

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def foreground(self) -> np.ndarray:
        """Probability of any nucleus class (everything but background)."""
        return self.probs[1:].sum(axis=0)


class SdcsNetwork:
    """Parameter container plus forward/backward passes for the trunk & head."""

    def __init__(self, config: SdcsConfig, blocks, head):
        self.config = config
        self.blocks = blocks  # list of lists of conv3x3 LayerParams
        self.head = head  # three conv1x1 LayerParams
        self._used_blocks = max(config.hypercolumn_blocks)

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, config: SdcsConfig, seed: int) -> "SdcsNetwork":
        rng = np.random.default_rng(seed)
        blocks = []
        c_in = 3
        for b, (n_convs, width) in enumerate(
            zip(config.block_convs, config.block_widths), start=1
        ):
            layer_list = []
            for i in range(n_convs):
                layer_list.append(conv_layer(c_in, width, 3, rng, name=f"block{b}.conv{i}"))
                c_in = width
            blocks.append(layer_list)
        widths = [config.total_channels, *config.head_widths, config.num_classes]
        head = [
            conv_layer(widths[i], widths[i + 1], 1, rng, name=f"head{i}")
            for i in range(3)
        ]
        return cls(config, blocks, head)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer_list in self.blocks[: self._used_blocks]:
            for p in layer_list:
                out.extend([p.weight, p.bias])
        for p in self.head:
            out.extend([p.weight, p.bias])
        return out

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    # -- serialization ------------------------------------------------------

    def save(self, path) -> None:
        records = []
        for b, layer_list in enumerate(self.blocks, start=1):
            for i, p in enumerate(layer_list):
                records.append((f"block{b}.conv{i}:{p.kind}.w", p.weight.data))
                records.append((f"block{b}.conv{i}:{p.kind}.b", p.bias.data))
        for i, p in enumerate(self.head):
            records.append((f"head{i}:{p.kind}.w", p.weight.data))
            records.append((f"head{i}:{p.kind}.b", p.bias.data))
        save_records(path, records)

    @classmethod
    def load(cls, path, config: SdcsConfig) -> "SdcsNetwork":
        loaded = dict(load_records(path))
        template = cls.initialize(config, seed=0)
        for b, layer_list in enumerate(template.blocks, start=1):
            for i, p in enumerate(layer_list):
                cls._restore(loaded, f"block{b}.conv{i}:{p.kind}", p)
        for i, p in enumerate(template.head):
            cls._restore(loaded, f"head{i}:{p.kind}", p)
        return template

    @staticmethod
    def _restore(loaded: dict, prefix: str, p: LayerParams) -> None:
        for role, tensor in (("w", p.weight), ("b", p.bias)):
            tag = f"{prefix}.{role}"
            if tag not in loaded:
                raise ShapeMismatchError(f"weights file is missing record {tag!r}")
            arr = loaded[tag]
            if arr.shape != tensor.data.shape:
                raise ShapeMismatchError(
                    f"record {tag!r} has shape {arr.shape}, config expects {tensor.data.shape}"
                )
            tensor.data = arr.copy()

    # -- forward ------------------------------------------------------------

    def _forward_trunk(self, x: np.ndarray, keep_caches: bool):
        """Run blocks 1..max tapped block; return taps and backward caches."""
        caches = {"convs": [], "pools": [], "tap_hw": {}}
        taps = {}
        cur = x
        for b in range(1, self._used_blocks + 1):
            conv_caches = []
            for p in self.blocks[b - 1]:
                pre = conv_forward(cur, p)
                post = relu(pre)
                conv_caches.append((cur, pre) if keep_caches else None)
                cur = post
            caches["convs"].append(conv_caches)
            if b in self.config.hypercolumn_blocks:
                taps[b] = cur
                caches["tap_hw"][b] = cur.shape[2:]
            if b < self._used_blocks:
                pooled, idx = maxpool2x2(cur)
                caches["pools"].append((cur.shape, idx) if keep_caches else None)
                cur = pooled
        return taps, caches

    def _forward_stack(self, images: np.ndarray, keep_caches: bool = False):
        """Batched hypercolumn stack; images are (N, 3, P, P) float32."""
        p = self.config.patch_size
        if images.shape[2] != p or images.shape[3] != p:
            raise ShapeMismatchError(
                f"patch dims {images.shape[2:]} != configured patch_size {p}"
            )
        taps, caches = self._forward_trunk(images, keep_caches)
        order = sorted(self.config.hypercolumn_blocks)
        parts = [upsample_bilinear(taps[b], (p, p)) for b in order]
        stack = channel_concat(parts)
        counts = [parts[i].shape[1] for i in range(len(parts))]
        caches["stack_counts"] = counts
        caches["stack_order"] = order
        return stack, caches

    def forward_hypercolumns(self, patch: np.ndarray) -> HypercolumnStack:
        """Hypercolumn descriptor stack for one uint8 (P, P, 3) patch."""
        x = normalize_patch(patch)[None]
        stack, caches = self._forward_stack(x)
        widths = {
            b: self.config.block_widths[b - 1] for b in caches["stack_order"]
        }
        return HypercolumnStack(planes=stack[0], block_channels=widths)

    # -- head ---------------------------------------------------------------

    def head_logits(self, descriptors: np.ndarray) -> np.ndarray:
        """Row-chunked head evaluation; descriptors are (n, total_channels)."""
        if descriptors.shape[1] != self.config.total_channels:
            raise ShapeMismatchError(
                f"descriptor width {descriptors.shape[1]} != "
                f"head input width {self.config.total_channels}"
            )
        h = descriptors
        for i, p in enumerate(self.head):
            h = _affine_rows(h, p.weight.data[:, :, 0, 0], p.bias.data)
            if i < len(self.head) - 1:
                h = relu(h)
        return h

    def head_probabilities(self, descriptors: np.ndarray) -> np.ndarray:
        return softmax(self.head_logits(descriptors), axis=1)

    def predict_mask(self, patch: np.ndarray) -> PixelPredictionMap:
        """Dense per-pixel class probabilities over the full patch."""
        stack = self.forward_hypercolumns(patch)
        p = stack.patch_size
        fibers = np.ascontiguousarray(stack.planes.reshape(stack.total_channels, p * p).T)
        probs = self.head_probabilities(fibers)
        return PixelPredictionMap(
            probs=np.ascontiguousarray(probs.T.reshape(self.config.num_classes, p, p))
        )

    # -- training internals --------------------------------------------------

    def _head_forward_train(self, s0: np.ndarray):
        w = [p.weight.data[:, :, 0, 0] for p in self.head]
        b = [p.bias.data for p in self.head]
        a1 = s0 @ w[0].T + b[0]
        r1 = relu(a1)
        a2 = r1 @ w[1].T + b[1]
        r2 = relu(a2)
        logits = r2 @ w[2].T + b[2]
        return logits, (s0, a1, r1, a2, r2, w)

    def _head_backward_train(self, cache, dlogits: np.ndarray) -> np.ndarray:
        s0, a1, r1, a2, r2, w = cache
        grads = [None, None, None]
        grads[2] = (dlogits.T @ r2, dlogits.sum(0))
        dr2 = dlogits @ w[2]
        da2 = relu_backward(a2, dr2)
        grads[1] = (da2.T @ r1, da2.sum(0))
        dr1 = da2 @ w[1]
        da1 = relu_backward(a1, dr1)
        grads[0] = (da1.T @ s0, da1.sum(0))
        ds0 = da1 @ w[0]
        for p, (gw, gb) in zip(self.head, grads):
            p.weight.add_grad(gw[:, :, None, None])
            p.bias.add_grad(gb)
        return ds0

    def _backward_trunk(self, caches, d_stack: np.ndarray) -> None:
        parts = channel_concat_backward(caches["stack_counts"], d_stack)
        order = caches["stack_order"]
        d_tap = {b: None for b in range(1, self._used_blocks + 1)}
        for b, g in zip(order, parts):
            d_tap[b] = upsample_bilinear_backward(caches["tap_hw"][b], g)
        d_out = None  # grad w.r.t. current block's (post-ReLU) output
        for b in range(self._used_blocks, 0, -1):
            g = d_tap[b]
            if d_out is not None:
                g = d_out if g is None else g + d_out
            if g is None:
                g = 0.0
            for p, cache in zip(reversed(self.blocks[b - 1]), reversed(caches["convs"][b - 1])):
                x_in, pre = cache
                if isinstance(g, float):
                    g = np.zeros_like(pre)
                g_pre = relu_backward(pre, g)
                gx, gw, gb = conv_backward(x_in, p, g_pre)
                p.weight.add_grad(gw)
                p.bias.add_grad(gb)
                g = gx
            if b > 1:
                shape, idx = caches["pools"][b - 2]
                d_out = maxpool2x2_backward(idx, shape, g)

    def train_step(
        self,
        images: np.ndarray,
        sample_xy: list[np.ndarray],
        sample_labels: list[np.ndarray],
        class_weights: np.ndarray,
        state: SgdState,
    ) -> tuple[float, float]:
        """One SGD step over a minibatch; returns (loss, sampled-pixel accuracy)."""
        self.zero_grads()
        stack, caches = self._forward_stack(images, keep_caches=True)
        n, c = stack.shape[0], stack.shape[1]
        fibers = []
        for i in range(n):
            xy = sample_xy[i]
            fibers.append(stack[i, :, xy[:, 1], xy[:, 0]])
        s0 = np.concatenate(fibers, axis=0)
        labels = np.concatenate(sample_labels)
        logits, cache = self._head_forward_train(s0)
        loss, dlogits = cross_entropy(logits, labels, class_weights)
        acc = float((logits.argmax(axis=1) == labels).mean())
        ds0 = self._head_backward_train(cache, dlogits)
        d_stack = np.zeros_like(stack)
        offset = 0
        for i in range(n):
            xy = sample_xy[i]
            rows = ds0[offset : offset + xy.shape[0]]
            np.add.at(d_stack, (i, slice(None), xy[:, 1], xy[:, 0]), rows)
            offset += xy.shape[0]
        self._backward_trunk(caches, d_stack)
        sgd_step(self.parameters(), state)
        return loss, acc


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------

def sample_sparse(stack: HypercolumnStack, points) -> SparseSampleSet:
    """Descriptor fibers at the given (x, y) points, order preserved."""
    xy = np.asarray(points, dtype=np.intp).reshape(-1, 2)
    p = stack.patch_size
    if xy.size and (xy.min() < 0 or xy[:, 0].max() >= p or xy[:, 1].max() >= p):
        bad = xy[(xy[:, 0] < 0) | (xy[:, 1] < 0) | (xy[:, 0] >= p) | (xy[:, 1] >= p)]
        raise ShapeMismatchError(f"sample point(s) {bad.tolist()} outside {p}x{p} patch")
    descriptors = np.ascontiguousarray(stack.planes[:, xy[:, 1], xy[:, 0]].T)
    return SparseSampleSet(xy=xy, descriptors=descriptors)


def head_forward(network: SdcsNetwork, samples: SparseSampleSet) -> np.ndarray:
    """Per-sample class probabilities; bitwise-consistent with predict_mask."""
    return network.head_probabilities(samples.descriptors)


def disk_offsets(radius: int) -> np.ndarray:
    """Integer offsets (dx, dy) with dx^2 + dy^2 <= radius^2."""
    r = int(radius)
    span = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(span, span)
    keep = dx**2 + dy**2 <= radius**2
    return np.stack([dx[keep], dy[keep]], axis=1)


def build_training_mask(
    annotations,
    patch_size: int,
    config: SdcsConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sparse labeled pixel set for one patch.

    Pixels within ``label_disk_radius`` of an annotated centroid take that
    centroid's segmentation class; overlap goes to the nearer centroid with
    ties broken by the lower annotation index. Random background pixels top
    the set up to ``sparse_samples_per_patch``. Returns (xy, labels).

    ``annotations`` is a sequence of (x, y, class_name) with coordinates in
    patch space.
    """
    budget = config.sparse_samples_per_patch
    offsets = disk_offsets(config.label_disk_radius)
    best: dict[tuple[int, int], tuple[int, int, int]] = {}  # (x,y) -> (d2, idx, label)
    for idx, (ax, ay, cls) in enumerate(annotations):
        label = SEG_CLASS_OF[cls] if isinstance(cls, str) else int(cls)
        cx, cy = int(round(ax)), int(round(ay))
        for dx, dy in offsets:
            x, y = cx + dx, cy + dy
            if not (0 <= x < patch_size and 0 <= y < patch_size):
                continue
            d2 = (x - cx) ** 2 + (y - cy) ** 2
            prev = best.get((x, y))
            if prev is None or (d2, idx) < (prev[0], prev[1]):
                best[(x, y)] = (d2, idx, label)
    fg_xy = np.array(sorted(best.keys()), dtype=np.intp).reshape(-1, 2)
    fg_labels = np.array([best[tuple(p)][2] for p in fg_xy], dtype=np.intp)
    if fg_xy.shape[0] > budget:
        keep = rng.choice(fg_xy.shape[0], size=budget, replace=False)
        keep.sort()
        fg_xy, fg_labels = fg_xy[keep], fg_labels[keep]

    n_background = budget - fg_xy.shape[0]
    taken = set(map(tuple, fg_xy))
    flat = rng.permutation(patch_size * patch_size)
    bg = []
    for f in flat:
        if len(bg) >= n_background:
            break
        x, y = int(f % patch_size), int(f // patch_size)
        if (x, y) not in taken:
            bg.append((x, y))
    bg_xy = np.array(bg, dtype=np.intp).reshape(-1, 2)
    xy = np.concatenate([fg_xy, bg_xy], axis=0)
    labels = np.concatenate(
        [fg_labels, np.full(bg_xy.shape[0], SEG_BACKGROUND, dtype=np.intp)]
    )
    return xy, labels


def class_balance_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency class weights (mean 1 over present classes)."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(num_classes)
    weights[present] = counts[present].sum() / (present.sum() * counts[present])
    return weights


@dataclass
class TrainingPatch:
    """One training pair: raw patch pixels plus its sparse labeled points."""

    image: np.ndarray  # (P, P, 3) uint8
    sample_xy: np.ndarray  # (n, 2)
    sample_labels: np.ndarray  # (n,)


def train_sdcs(
    pairs: list[TrainingPatch],
    config: SdcsConfig,
    train_config: SdcsTrainConfig,
    seed: int,
) -> tuple[SdcsNetwork, list[tuple[int, float, float]]]:
    """Train from scratch on (patch, sparse mask) pairs.

    Returns the network and a history of (epoch, mean loss, sampled-pixel
    accuracy) rows. Deterministic for a fixed seed. A NaN loss aborts with
    the epoch index in the error message.
    """
    if not pairs:
        raise ValueError("train_sdcs: empty dataset")
    sizes = {p.image.shape for p in pairs}
    if len(sizes) != 1:
        raise ShapeMismatchError(f"inconsistent patch shapes in dataset: {sorted(sizes)}")

    network = SdcsNetwork.initialize(config, seed)
    state = SgdState(train_config.learning_rate, train_config.momentum)
    all_labels = np.concatenate([p.sample_labels for p in pairs])
    weights = class_balance_weights(all_labels, config.num_classes)
    shuffler = np.random.default_rng(seed + 1)
    images = np.stack([normalize_patch(p.image) for p in pairs])

    history = []
    for epoch in range(train_config.epochs):
        order = shuffler.permutation(len(pairs))
        losses, accs = [], []
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            try:
                loss, acc = network.train_step(
                    images[batch],
                    [pairs[i].sample_xy for i in batch],
                    [pairs[i].sample_labels for i in batch],
                    weights,
                    state,
                )
            except NonFiniteError as err:
                raise NonFiniteError(f"training diverged at epoch {epoch}: {err}") from err
            losses.append(loss)
            accs.append(acc)
        history.append((epoch, float(np.mean(losses)), float(np.mean(accs))))
        log.debug("epoch %d loss %.4f acc %.4f", epoch, history[-1][1], history[-1][2])
    return network, history


def history_to_csv(history: list[tuple[int, float, float]]) -> str:
    lines = ["epoch,loss,sampled_pixel_accuracy"]
    for epoch, loss, acc in history:
        lines.append(f"{epoch},{loss:.6f},{acc:.6f}")
    return "\n".join(lines) + "\n"
