"""RBF-kernel SVM trained by sequential minimal optimization.

Multi-class handling is one-vs-one: one binary SMO problem per class pair,
prediction by majority vote with ties broken toward the lowest class index.
The SMO loop is Platt's algorithm with an error cache and deterministic
second-choice fallbacks, stopping when the largest KKT violation drops to
``tol`` or the update budget runs out (the model then carries a warning
flag).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..nn.serial import MAGIC_SVM, load_records, save_records

log = logging.getLogger("sdcs.svm")


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """exp(-gamma * ||x - y||^2) for all row pairs."""
    aa = (a**2).sum(axis=1)[:, None]
    bb = (b**2).sum(axis=1)[None, :]
    sq = np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)
    return np.exp(-gamma * sq)


def dual_objective(kernel: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    """SMO dual: sum(alpha) - 1/2 * alpha^T (K * yy^T) alpha."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ kernel @ ay)


def max_kkt_violation(
    kernel: np.ndarray, y: np.ndarray, alpha: np.ndarray, b: float, c: float
) -> float:
    """Largest violation of the KKT optimality conditions."""
    f = kernel @ (alpha * y) + b
    margin = y * f
    viol = np.zeros_like(margin)
    lower = alpha < c - 1e-12  # may still increase: requires margin >= 1
    upper = alpha > 1e-12  # may still decrease: requires margin <= 1
    viol[lower] = np.maximum(viol[lower], 1.0 - margin[lower])
    viol[upper] = np.maximum(viol[upper], margin[upper] - 1.0)
    return float(viol.max()) if viol.size else 0.0


@dataclass
class BinarySvm:
    alpha: np.ndarray
    bias: float
    iterations: int
    converged: bool
    kkt_residual: float


def smo_train(
    kernel: np.ndarray,
    y: np.ndarray,
    c: float,
    tol: float = 1e-3,
    max_iterations: int = 20000,
) -> BinarySvm:
    """Platt SMO on a precomputed kernel; labels must be +/-1."""
    n = y.shape[0]
    alpha = np.zeros(n)
    bias = 0.0
    errors = -y.astype(np.float64)  # decision(x_i) - y_i with all-zero alpha
    eps = 1e-12
    steps = 0

    def take_step(i1: int, i2: int) -> bool:
        nonlocal bias, steps
        if i1 == i2:
            return False
        a1, a2 = alpha[i1], alpha[i2]
        y1, y2 = y[i1], y[i2]
        e1, e2 = errors[i1], errors[i2]
        s = y1 * y2
        if s > 0:
            low, high = max(0.0, a1 + a2 - c), min(c, a1 + a2)
        else:
            low, high = max(0.0, a2 - a1), min(c, c + a2 - a1)
        if high - low < eps:
            return False
        k11, k12, k22 = kernel[i1, i1], kernel[i1, i2], kernel[i2, i2]
        eta = k11 + k22 - 2.0 * k12
        if eta <= 0:
            return False  # RBF kernels keep eta > 0 except for duplicates
        a2_new = a2 + y2 * (e1 - e2) / eta
        a2_new = min(max(a2_new, low), high)
        if abs(a2_new - a2) < eps * (a2_new + a2 + eps):
            return False
        a1_new = a1 + s * (a2 - a2_new)
        d1 = y1 * (a1_new - a1)
        d2 = y2 * (a2_new - a2)
        b1 = bias - e1 - d1 * k11 - d2 * k12
        b2 = bias - e2 - d1 * k12 - d2 * k22
        if 0.0 < a1_new < c:
            new_bias = b1
        elif 0.0 < a2_new < c:
            new_bias = b2
        else:
            new_bias = (b1 + b2) / 2.0
        errors[:] += d1 * kernel[i1] + d2 * kernel[i2] + (new_bias - bias)
        alpha[i1], alpha[i2] = a1_new, a2_new
        bias = new_bias
        steps += 1
        return True

    def examine(i2: int) -> bool:
        y2, a2, e2 = y[i2], alpha[i2], errors[i2]
        r2 = e2 * y2
        if not ((r2 < -tol and a2 < c) or (r2 > tol and a2 > 0)):
            return False
        non_bound = np.nonzero((alpha > 0) & (alpha < c))[0]
        if non_bound.size > 1:
            i1 = int(non_bound[np.argmax(np.abs(errors[non_bound] - e2))])
            if take_step(i1, i2):
                return True
        start = (i2 + 1) % n
        for k in range(non_bound.size):
            i1 = int(non_bound[(k + start) % non_bound.size])
            if take_step(i1, i2):
                return True
        for k in range(n):
            i1 = (k + start) % n
            if take_step(i1, i2):
                return True
        return False

    examine_all = True
    changed = 1
    while (changed > 0 or examine_all) and steps < max_iterations:
        changed = 0
        if examine_all:
            indices = range(n)
        else:
            indices = np.nonzero((alpha > 0) & (alpha < c))[0]
        for i2 in indices:
            if examine(int(i2)):
                changed += 1
            if steps >= max_iterations:
                break
        if examine_all:
            examine_all = False
        elif changed == 0:
            examine_all = True  # one last full sweep; no change there ends the loop

    residual = max_kkt_violation(kernel, y, alpha, bias, c)
    converged = residual <= tol
    if not converged:
        log.warning(
            "SMO stopped at %d updates with KKT residual %.2e > tol %.0e",
            steps,
            residual,
            tol,
        )
    return BinarySvm(
        alpha=alpha, bias=bias, iterations=steps, converged=converged, kkt_residual=residual
    )


@dataclass
class PairModel:
    class_a: int
    class_b: int
    support_x: np.ndarray  # (n_sv, d)
    dual_coef: np.ndarray  # alpha_i * y_i, y = +1 for class_a
    bias: float
    kkt_residual: float
    converged: bool


@dataclass
class SvmModel:
    """One-vs-one RBF SVM plus the training normalization statistics."""

    classes: tuple
    gamma: float
    c: float
    pairs: list = field(default_factory=list)
    means: np.ndarray | None = None
    stds: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return all(p.converged for p in self.pairs)

    @property
    def max_kkt_residual(self) -> float:
        return max(p.kkt_residual for p in self.pairs)


def svm_train(
    features: np.ndarray,
    labels: np.ndarray,
    c: float,
    gamma: float,
    tol: float = 1e-3,
    max_iterations: int = 20000,
    means: np.ndarray | None = None,
    stds: np.ndarray | None = None,
) -> SvmModel:
    """Train one-vs-one SMO models on (already normalized) features."""
    labels = np.asarray(labels)
    classes = tuple(sorted(np.unique(labels).tolist()))
    if len(classes) < 2:
        raise ValueError(f"svm_train: need >= 2 classes, got {classes}")
    x = np.asarray(features, dtype=np.float64)
    model = SvmModel(classes=classes, gamma=gamma, c=c, means=means, stds=stds)
    for ia in range(len(classes)):
        for ib in range(ia + 1, len(classes)):
            a, b = classes[ia], classes[ib]
            sel = (labels == a) | (labels == b)
            xs = x[sel]
            ys = np.where(labels[sel] == a, 1.0, -1.0)
            kernel = rbf_kernel(xs, xs, gamma)
            fit = smo_train(kernel, ys, c, tol, max_iterations)
            sv = fit.alpha > 1e-10
            model.pairs.append(
                PairModel(
                    class_a=a,
                    class_b=b,
                    support_x=xs[sv].copy(),
                    dual_coef=(fit.alpha * ys)[sv].copy(),
                    bias=fit.bias,
                    kkt_residual=fit.kkt_residual,
                    converged=fit.converged,
                )
            )
    return model


def pair_decision(model: SvmModel, pair: PairModel, x: np.ndarray) -> np.ndarray:
    if pair.support_x.shape[0] == 0:
        return np.full(x.shape[0], pair.bias)
    k = rbf_kernel(x, pair.support_x, model.gamma)
    return k @ pair.dual_coef + pair.bias


def svm_predict(model: SvmModel, features: np.ndarray) -> np.ndarray:
    """Majority vote over pair decisions; ties go to the lowest class index.

    Applies the stored training normalization when present, so callers pass
    raw feature rows.
    """
    x = np.asarray(features, dtype=np.float64)
    if model.means is not None:
        from .features import apply_normalization

        x = apply_normalization(model.means, model.stds, x)
    votes = np.zeros((x.shape[0], len(model.classes)), dtype=np.int64)
    index_of = {cls: i for i, cls in enumerate(model.classes)}
    for pair in model.pairs:
        d = pair_decision(model, pair, x)
        winner_a = d >= 0
        votes[winner_a, index_of[pair.class_a]] += 1
        votes[~winner_a, index_of[pair.class_b]] += 1
    picked = votes.argmax(axis=1)  # argmax takes the first (lowest) on ties
    return np.array([model.classes[i] for i in picked])


def grid_search_svm(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    c_grid,
    gamma_grid,
    tol: float = 1e-3,
    max_iterations: int = 20000,
    means: np.ndarray | None = None,
    stds: np.ndarray | None = None,
) -> tuple[SvmModel, list[tuple[float, float, float]]]:
    """Pick (C, gamma) by validation accuracy; first of the grid wins ties.

    ``val_x`` must be raw (unnormalized) rows when means/stds are given.
    """
    results = []
    best = None
    for c in c_grid:
        for gamma in gamma_grid:
            model = svm_train(
                train_x, train_y, c, gamma, tol, max_iterations, means=means, stds=stds
            )
            acc = float((svm_predict(model, val_x) == val_y).mean())
            results.append((c, gamma, acc))
            if best is None or acc > best[0]:
                best = (acc, model)
            log.debug("grid C=%g gamma=%g val acc %.4f", c, gamma, acc)
    return best[1], results


# ---------------------------------------------------------------------------
# serialization (same container family as network weights, magic "SVM1")
# ---------------------------------------------------------------------------

def save_svm(model: SvmModel, path) -> None:
    records = [
        ("svm:meta", np.array([model.gamma, model.c, len(model.classes), len(model.pairs)])),
        ("svm:classes", np.array(model.classes, dtype=np.float32)),
    ]
    if model.means is not None:
        records.append(("svm:means", model.means))
        records.append(("svm:stds", model.stds))
    for i, p in enumerate(model.pairs):
        records.append(
            (
                f"svm:pair{i}:meta",
                np.array([p.class_a, p.class_b, p.bias, p.kkt_residual, float(p.converged)]),
            )
        )
        records.append((f"svm:pair{i}:sv", p.support_x))
        records.append((f"svm:pair{i}:coef", p.dual_coef))
    save_records(path, records, magic=MAGIC_SVM)


def load_svm(path) -> SvmModel:
    loaded = dict(load_records(path, magic=MAGIC_SVM))
    gamma, c, n_classes, n_pairs = loaded["svm:meta"].astype(np.float64)
    classes = tuple(int(v) for v in loaded["svm:classes"])
    model = SvmModel(
        classes=classes,
        gamma=float(gamma),
        c=float(c),
        means=loaded.get("svm:means"),
        stds=loaded.get("svm:stds"),
    )
    if model.means is not None:
        model.means = model.means.astype(np.float64)
        model.stds = model.stds.astype(np.float64)
    for i in range(int(n_pairs)):
        meta = loaded[f"svm:pair{i}:meta"].astype(np.float64)
        model.pairs.append(
            PairModel(
                class_a=int(meta[0]),
                class_b=int(meta[1]),
                support_x=loaded[f"svm:pair{i}:sv"].astype(np.float64),
                dual_coef=loaded[f"svm:pair{i}:coef"].astype(np.float64),
                bias=float(meta[2]),
                kkt_residual=float(meta[3]),
                converged=bool(meta[4]),
            )
        )
    return model
