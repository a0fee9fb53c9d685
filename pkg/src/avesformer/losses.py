"""Segmentation losses, their closed-form gradients, and J / F metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .tensor import Rng, ShapeError, Tensor, as_tensor, logistic

EPS = 1e-6
BETA_SQ = 0.3


@dataclass(frozen=True)
class LossWeights:
    iou: float = 1.8
    dice: float = 1.0
    aux: float = 0.1

    def __post_init__(self):
        if min(self.iou, self.dice, self.aux) < 0:
            raise ValueError("loss weights must be non-negative")

    def scaled(self, s: float) -> "LossWeights":
        return LossWeights(self.iou * s, self.dice * s, self.aux * s)


LOSS_PROFILES = {
    "S4MS3": LossWeights(1.8, 1.0, 0.1),
    "AVSS": LossWeights(1.0, 1.0, 0.1),
}


@dataclass(frozen=True)
class MaskPair:
    pred: Tensor  # values in (0, 1)
    gt: Tensor  # values in {0, 1}

    def __post_init__(self):
        p = as_tensor(self.pred, name="prediction")
        g = as_tensor(self.gt, name="ground truth")
        if p.shape != g.shape:
            raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
        if np.any((p < 0) | (p > 1)):
            raise ValueError("prediction values must lie in [0, 1]")
        if np.any((g != 0) & (g != 1)):
            raise ValueError("ground truth must be binary")
        object.__setattr__(self, "pred", p)
        object.__setattr__(self, "gt", g)


def dice_loss(pair: MaskPair, eps: float = EPS) -> float:
    p, g = pair.pred, pair.gt
    inter = np.sum(p * g)
    return float(1.0 - (2.0 * inter + eps) / (p.sum() + g.sum() + eps))


def iou_loss(pair: MaskPair, eps: float = EPS) -> float:
    """Soft Jaccard loss ``1 - (I + eps) / (U + eps)``."""
    p, g = pair.pred, pair.gt
    inter = np.sum(p * g)
    union = p.sum() + g.sum() - inter
    return float(1.0 - (inter + eps) / (union + eps))


def dice_grad(pair: MaskPair, eps: float = EPS) -> Tensor:
    p, g = pair.pred, pair.gt
    num = 2.0 * np.sum(p * g) + eps
    den = p.sum() + g.sum() + eps
    return -(2.0 * g * den - num) / den**2


def iou_grad(pair: MaskPair, eps: float = EPS) -> Tensor:
    p, g = pair.pred, pair.gt
    inter = np.sum(p * g)
    num = inter + eps
    den = p.sum() + g.sum() - inter + eps
    return -(g * den - num * (1.0 - g)) / den**2


def loss_gradients(pair: MaskPair, eps: float = EPS) -> dict[str, Tensor]:
    return {"dice": dice_grad(pair, eps), "iou": iou_grad(pair, eps)}


def aux_loss(f_elf, foreground, eps: float = EPS) -> float:
    """Mean over channels of the Dice loss of each squashed channel against M_f."""
    f_elf = as_tensor(f_elf, 3, "F_ELF")
    foreground = as_tensor(foreground, 2, "foreground")
    if f_elf.shape[1:] != foreground.shape:
        raise ShapeError(f"F_ELF spatial {f_elf.shape[1:]} != foreground {foreground.shape}")
    probs = logistic(f_elf)
    return float(np.mean([dice_loss(MaskPair(ch, foreground), eps) for ch in probs]))


def downsample_nearest(mask, height: int, width: int) -> Tensor:
    """Nearest-neighbour resample using pixel centres."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return mask[np.ix_(rows, cols)]


@dataclass(frozen=True)
class LossBreakdown:
    iou: float
    dice: float
    aux: float
    total: float


def total_loss(
    pair: MaskPair,
    f_elf,
    foreground,
    weights: LossWeights = LOSS_PROFILES["S4MS3"],
    eps: float = EPS,
) -> LossBreakdown:
    """Weighted sum of soft-IoU, Dice and (when F_ELF exists) auxiliary Dice."""
    l_iou = iou_loss(pair, eps)
    l_dice = dice_loss(pair, eps)
    l_aux = 0.0 if f_elf is None else aux_loss(f_elf, foreground, eps)
    total = weights.iou * l_iou + weights.dice * l_dice + weights.aux * l_aux
    return LossBreakdown(l_iou, l_dice, l_aux, total)


# ---------------------------------------------------------------------------
# finite-difference check
# ---------------------------------------------------------------------------


def central_difference(f: Callable[[Tensor], float], x, step: float = 1e-6) -> Tensor:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def random_mask_pair(rng: Rng, height: int, width: int, margin: float = 0.05) -> MaskPair:
    """Predictions kept ``margin`` away from 0 and 1 so central differences stay in range."""
    pred = rng.uniform((height, width), margin, 1.0 - margin)
    gt = (rng.random((height, width)) < 0.5).astype(np.float64)
    return MaskPair(pred, gt)


@dataclass(frozen=True)
class GradcheckResult:
    cases: int
    max_rel_error: float
    worst_loss: str


def gradcheck(cases: int = 50, seed: int = 0, step: float = 1e-6, eps: float = EPS) -> GradcheckResult:
    """Compare analytic Dice / soft-IoU gradients with central differences."""
    rng = Rng(seed)
    worst, worst_name = 0.0, ""
    losses = {"dice": (dice_loss, dice_grad), "iou": (iou_loss, iou_grad)}
    for _ in range(cases):
        h, w = (int(v) for v in rng.integers(4, 17, 2))
        pair = random_mask_pair(rng, h, w)
        for name, (loss, grad) in losses.items():
            numeric = central_difference(lambda p: loss(MaskPair(p, pair.gt), eps), pair.pred, step)
            err = relative_error(grad(pair, eps), numeric)
            if err > worst:
                worst, worst_name = err, name
    return GradcheckResult(cases, worst, worst_name)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def binarize(mask, threshold: float = 0.5) -> Tensor:
    return (np.asarray(mask, dtype=np.float64) >= threshold).astype(np.float64)


def _check_binary(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if np.any((m != 0) & (m != 1)):
            raise ValueError(f"{name} must be binary; threshold probabilities first")
    return pred.astype(bool), gt.astype(bool)


def jaccard(pred, gt) -> float:
    """|pred & gt| / |pred | gt|, with 1.0 when both masks are empty."""
    p, g = _check_binary(pred, gt)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def f_score(pred, gt, beta_sq: float = BETA_SQ) -> float:
    """F-beta from pixel counts; 1.0 when both masks are empty, 0.0 on a zero denominator."""
    p, g = _check_binary(pred, gt)
    tp = int(np.count_nonzero(p & g))
    n_pred = int(np.count_nonzero(p))
    n_gt = int(np.count_nonzero(g))
    if n_pred == 0 and n_gt == 0:
        return 1.0
    return f_beta(tp / n_pred if n_pred else 0.0, tp / n_gt if n_gt else 0.0, beta_sq)


def f_beta(precision: float, recall: float, beta_sq: float = BETA_SQ) -> float:
    den = beta_sq * precision + recall
    if den == 0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / den


def write_metrics_csv(path: str | Path, rows: Iterable[tuple[str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "jaccard", "f_score"])
        for sample_id, j, f in rows:
            writer.writerow([sample_id, f"{j:.6f}", f"{f:.6f}"])
