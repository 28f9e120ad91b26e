"""Segmentation losses and evaluation metrics.

Label masks are plain 2-D integer arrays. Contours are ``(k, 2)`` integer
arrays of ``(row, col)`` points. Hausdorff distances are in pixels unless a
``spacing`` factor is supplied; an empty contour yields ``None`` rather than
a number.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CLASS_NAMES = {0: "background", 1: "RV", 2: "LMyo", 3: "LV"}
DEFAULT_ETA = 0.25


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def dice_loss(probs: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss averaged over batch and classes.

    ``1 - mean_{n,k} (2 sum(p t) + s) / (sum p + sum t + s)``; returns a
    ``(1, 1, 1, 1)`` tensor.
    """
    if probs.data.ndim != 4 or probs.shape != target.shape:
        raise ShapeError(f"dice_loss: probs {probs.shape} and target {target.shape} differ")
    p, t = probs.data, target.data.astype(probs.dtype, copy=False)
    n, k = p.shape[:2]
    inter = (p * t).sum(axis=(2, 3))
    denom = p.sum(axis=(2, 3)) + t.sum(axis=(2, 3)) + smooth
    ratio = (2 * inter + smooth) / denom
    out = Tensor(np.asarray(1.0 - ratio.mean(), dtype=p.dtype).reshape(1, 1, 1, 1))

    def back(g):
        # d ratio / d p = (2 t denom - (2 inter + s)) / denom^2
        coef = -g.reshape(()) / (n * k)
        gp = coef * (2 * t * denom[:, :, None, None] - (2 * inter + smooth)[:, :, None, None]) \
            / (denom ** 2)[:, :, None, None]
        return gp.astype(p.dtype), None

    return T._record("dice_loss", (probs, target), out, back)


@dataclass
class SupervisionWeights:
    """Balancing weights for the auxiliary supervision paths.

    The main output's loss always has weight 1; ``eta[i]`` scales the loss of
    auxiliary path ``i``.
    """

    eta: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.eta = tuple(float(e) for e in self.eta)
        if any(e < 0 for e in self.eta):
            raise ValueError(f"supervision weights must be non-negative, got {self.eta}")

    @classmethod
    def uniform(cls, paths: int, value: float = DEFAULT_ETA) -> "SupervisionWeights":
        return cls((value,) * paths)

    def __len__(self) -> int:
        return len(self.eta)


def deep_supervision_loss(main_loss: Tensor, aux_losses: Sequence[Tensor],
                          weights: SupervisionWeights) -> Tensor:
    """``main + sum_i eta_i * aux_i``. Zero-weight terms are skipped entirely."""
    if len(aux_losses) != len(weights):
        raise ValueError(f"{len(aux_losses)} auxiliary losses but {len(weights)} weights")
    total = main_loss
    for loss, eta in zip(aux_losses, weights.eta):
        if eta == 0.0:
            continue
        total = T.add(total, T.scale(loss, eta))
    return total


# ---------------------------------------------------------------------------
# Overlap and distance metrics
# ---------------------------------------------------------------------------


def _check_masks(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"mask extents differ: {x.shape} vs {y.shape}")


def dice_coefficient(x: np.ndarray, y: np.ndarray, class_id: int) -> float:
    """DSC of one class. Both masks lacking the class counts as a perfect 1.0."""
    _check_masks(x, y)
    a = x == class_id
    b = y == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def extract_contour(mask: np.ndarray, class_id: int) -> np.ndarray:
    """Pixels of ``class_id`` that touch the image border or a 4-neighbour of another class."""
    region = mask == class_id
    padded = np.pad(region, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(region & ~interior)


def hausdorff_directed(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> Optional[float]:
    """``max_{x in a} min_{y in b} |x - y|``; ``None`` if either set is empty."""
    if len(a) == 0 or len(b) == 0:
        return None
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    worst = 0
    # chunked so large contours don't build a huge distance matrix
    for start in range(0, len(a), 1024):
        chunk = a[start:start + 1024]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, int(d2.min(axis=1).max()))
    return math.sqrt(worst) * spacing


@dataclass
class HausdorffResult:
    symmetric: Optional[float]
    forward: Optional[float]
    reverse: Optional[float]


def hausdorff_symmetric(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> HausdorffResult:
    ab = hausdorff_directed(a, b, spacing)
    ba = hausdorff_directed(b, a, spacing)
    sym = None if ab is None or ba is None else max(ab, ba)
    return HausdorffResult(sym, ab, ba)


@dataclass
class ClassScore:
    class_id: int
    dsc: float
    hd: HausdorffResult


@dataclass
class CaseResult:
    classes: list[ClassScore]

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([c.dsc for c in self.classes]))

    @property
    def mean_hd(self) -> Optional[float]:
        vals = [c.hd.symmetric for c in self.classes if c.hd.symmetric is not None]
        return float(np.mean(vals)) if vals else None

    def by_class(self, class_id: int) -> ClassScore:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(class_id)


def evaluate_case(pred: np.ndarray, truth: np.ndarray, num_classes: int = 4,
                  spacing: float = 1.0) -> CaseResult:
    """DSC and Hausdorff distance for every foreground class (1..K-1).

    HD is measured from the truth contour to the predicted one for the
    forward direction.
    """
    _check_masks(pred, truth)
    scores = []
    for k in range(1, num_classes):
        dsc = dice_coefficient(truth, pred, k)
        hd = hausdorff_symmetric(extract_contour(truth, k), extract_contour(pred, k), spacing)
        scores.append(ClassScore(k, dsc, hd))
    return CaseResult(scores)


METRICS_HEADER = ("case_id", "class", "dsc", "hd_sym", "hd_ab", "hd_ba")


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def write_metrics_csv(path, rows: Iterable[tuple[str, CaseResult]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for case_id, result in rows:
            for c in result.classes:
                writer.writerow([case_id, c.class_id, repr(float(c.dsc)),
                                 _fmt(c.hd.symmetric), _fmt(c.hd.forward), _fmt(c.hd.reverse)])


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "case_id": row["case_id"],
                "class": int(row["class"]),
                "dsc": float(row["dsc"]),
                **{k: (float(row[k]) if row[k] != "" else None) for k in ("hd_sym", "hd_ab", "hd_ba")},
            })
    return rows
