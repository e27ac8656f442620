"""Evaluation metrics for sets of stochastic segmentation samples.

Distances operate on binary masks with the convention IoU(empty, empty) =
Dice(empty, empty) = 1 (perfect agreement on the negative class) and
IoU(empty, nonempty) = 0; for more than two classes the per-pair distance
is 1 minus the mean IoU over the non-background classes.

The squared generalised energy distance uses d = 1 - IoU with all ordered
pairs (self-pairs included) inside each set; Hungarian-matched IoU tiles
the references up to the prediction count and solves the assignment that
minimises total distance.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class SampleSet:
    """M model predictions and N annotator references, all one-hot (k, h, w)."""

    predictions: np.ndarray
    references: np.ndarray

    def __post_init__(self):
        preds = np.asarray(self.predictions, dtype=np.uint8)
        refs = np.asarray(self.references, dtype=np.uint8)
        if preds.ndim != 4 or refs.ndim != 4:
            raise ValueError("predictions and references must be (count, k, h, w)")
        if preds.shape[0] < 1 or refs.shape[0] < 1:
            raise ValueError("need at least one prediction and one reference")
        if preds.shape[1:] != refs.shape[1:]:
            raise ValueError(f"map shapes differ: {preds.shape[1:]} vs {refs.shape[1:]}")
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "references", refs)

    @property
    def classes(self) -> int:
        return self.predictions.shape[1]


def _check_binary_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    a, b = _check_binary_pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a, b) -> float:
    """Dice coefficient 2|a&b| / (|a| + |b|); 1.0 when both masks are empty."""
    a, b = _check_binary_pair(a, b)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def _foreground_stack(maps: np.ndarray) -> np.ndarray:
    """(n, k, h, w) one-hot -> (n, k-1, d) float foreground-class masks."""
    flat = maps[:, 1:].reshape(maps.shape[0], maps.shape[1] - 1, -1)
    return flat.astype(np.float64)


def pairwise_iou_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of 1 - IoU between two one-hot map stacks, (len(a), len(b)).

    Multi-class maps are scored as 1 minus the mean per-foreground-class IoU.
    """
    fa, fb = _foreground_stack(a), _foreground_stack(b)
    dists = np.zeros((fa.shape[0], fb.shape[0]))
    for c in range(fa.shape[1]):
        inter = fa[:, c] @ fb[:, c].T
        union = fa[:, c].sum(axis=1)[:, None] + fb[:, c].sum(axis=1)[None, :] - inter
        ious = np.where(union > 0, inter / np.maximum(union, 1e-300), 1.0)
        dists += 1.0 - ious
    return dists / fa.shape[1]


def ged_squared(sample_set: SampleSet) -> tuple[float, float]:
    """Squared generalised energy distance and the sample-diversity term.

    D^2 = 2 E[d(ref, pred)] - E[d(pred, pred')] - E[d(ref, ref')], each
    expectation over all ordered pairs (self-distance 0 included), with
    d = 1 - IoU.  Finite-sample estimates can come out slightly negative;
    the raw value is reported.
    """
    preds, refs = sample_set.predictions, sample_set.references
    cross = pairwise_iou_distance(refs, preds).mean()
    diversity = pairwise_iou_distance(preds, preds).mean()
    ref_spread = pairwise_iou_distance(refs, refs).mean()
    return float(2.0 * cross - diversity - ref_spread), float(diversity)


def hm_iou(sample_set: SampleSet) -> float:
    """Mean IoU of the optimal one-to-one matching between the two sets.

    References are tiled (repeated whole, truncated to M) when the counts
    differ, then an M x M linear sum assignment minimising 1 - IoU is
    solved; the mean matched IoU lies in [0, 1].
    """
    preds, refs = sample_set.predictions, sample_set.references
    m, n = preds.shape[0], refs.shape[0]
    reps = -(-m // n)  # ceil
    tiled = np.concatenate([refs] * reps, axis=0)[:m]
    cost = pairwise_iou_distance(tiled, preds)
    rows, cols = linear_sum_assignment(cost)
    matched = 1.0 - cost[rows, cols]
    return float(matched.mean())


def mean_pairwise_dice(sample_set: SampleSet) -> float:
    """Mean Dice over all (reference, prediction) pairs, foreground classes."""
    preds, refs = sample_set.predictions, sample_set.references
    fa, fb = _foreground_stack(refs), _foreground_stack(preds)
    total = 0.0
    for c in range(fa.shape[1]):
        inter = fa[:, c] @ fb[:, c].T
        sizes = fa[:, c].sum(axis=1)[:, None] + fb[:, c].sum(axis=1)[None, :]
        total += np.where(sizes > 0, 2.0 * inter / np.maximum(sizes, 1e-300), 1.0).mean()
    return float(total / fa.shape[1])


def uncertainty_map(sample_set: SampleSet) -> np.ndarray:
    """Per-pixel entropy (bits) of the class frequencies across predictions.

    Zero where all samples agree; at most log2(k).
    """
    preds = sample_set.predictions
    if preds.shape[0] < 2:
        raise ValueError("uncertainty map needs at least 2 prediction samples")
    freq = preds.mean(axis=0).astype(np.float64)  # (k, h, w)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(freq > 0, freq * np.log2(freq), 0.0)
    return -terms.sum(axis=0)


@dataclass
class MetricReport:
    dataset: str
    checkpoint: str
    m: int
    n: int
    ged16: float
    ged_m: float
    diversity: float
    mean_dice: float
    hm_iou: float
    seed: int
    bpd: float | None = None
    solver: str = ""

    # The two trailing columns extend the base row: bits-per-dim for the
    # unconditional task and the solver used for continuous-time sampling.
    CSV_FIELDS = ("dataset", "checkpoint", "M", "N", "ged16", "gedM", "diversity", "dice", "hm_iou", "seed", "bpd", "solver")

    def csv_row(self) -> list:
        return [
            self.dataset,
            self.checkpoint,
            self.m,
            self.n,
            f"{self.ged16:.6f}",
            f"{self.ged_m:.6f}",
            f"{self.diversity:.6f}",
            f"{self.mean_dice:.6f}",
            f"{self.hm_iou:.6f}",
            self.seed,
            "" if self.bpd is None else f"{self.bpd:.6f}",
            self.solver,
        ]


def write_metric_csv(reports: list[MetricReport], path: str) -> None:
    exists = os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(MetricReport.CSV_FIELDS)
        for report in reports:
            writer.writerow(report.csv_row())
