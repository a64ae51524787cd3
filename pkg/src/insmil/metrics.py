"""Instance- and bag-level evaluation.

ROC-AUC uses the rank-sum formulation with midranks for ties, so the value
equals the probability that a random positive outscores a random negative
plus half the tie probability.  Bag scores are the arithmetic mean of the
bag's instance-positive probabilities.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .data import MilDataset
from .errors import DataError, DimensionError, UndefinedAucError, UsageError
from .nn import softmax

if TYPE_CHECKING:  # pragma: no cover
    from .prototypes import PseudoLabelStore
    from .training import TrainState


@dataclass
class RocResult:
    auc: float
    n_pos: int
    n_neg: int
    threshold_accuracy: float  # accuracy of (score >= 0.5) against the labels

    def to_dict(self) -> dict:
        return {"auc": self.auc, "n_pos": self.n_pos, "n_neg": self.n_neg,
                "threshold_accuracy": self.threshold_accuracy}


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the average of their ranks."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> RocResult:
    """Rank-based AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(
            f"scores {scores.shape} and labels {labels.shape} must be equal 1-D shapes")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"AUC needs both classes (n_pos={n_pos}, n_neg={n_neg})")
    ranks = midranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    acc = float(((scores >= 0.5).astype(np.int64) == labels).mean())
    return RocResult(auc=auc, n_pos=n_pos, n_neg=n_neg, threshold_accuracy=acc)


def predict_instances(state: "TrainState", ds: MilDataset) -> np.ndarray:
    """Positive-class probability per instance: clean query-branch forward
    (no augmentation), deterministic."""
    flat = ds.flatten()
    encoder = state.models.encoder
    if flat.features.shape[1] != encoder.layer_dims[0]:
        raise DimensionError(
            f"dataset feature dim {flat.features.shape[1]} does not match the "
            f"trained encoder input dim {encoder.layer_dims[0]}")
    h, _ = encoder.forward(flat.features)
    logits, _ = state.models.classifier.forward(h)
    return softmax(logits)[:, 1]


def predict_bags(instance_probs: np.ndarray, bag_ids: np.ndarray,
                 all_bag_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pool instance probabilities per bag.

    Returns (bag_ids ascending, scores).  When ``all_bag_ids`` is given,
    every listed bag must have at least one instance.
    """
    instance_probs = np.asarray(instance_probs, dtype=np.float64)
    bag_ids = np.asarray(bag_ids, dtype=np.int64)
    if instance_probs.shape != bag_ids.shape:
        raise DimensionError("instance_probs and bag_ids must align")
    uniq, inverse = np.unique(bag_ids, return_inverse=True)
    if all_bag_ids is not None:
        missing = sorted(set(int(b) for b in all_bag_ids) - set(uniq.tolist()))
        if missing:
            raise DataError(f"bag {missing[0]} has no instances")
    sums = np.zeros(uniq.shape[0])
    counts = np.zeros(uniq.shape[0])
    np.add.at(sums, inverse, instance_probs)
    np.add.at(counts, inverse, 1.0)
    return uniq, sums / counts


def pseudo_label_quality(labels_store: "PseudoLabelStore", truth: np.ndarray,
                         restrict_to_positive_bags: bool = False,
                         positive_bag_mask: np.ndarray | None = None) -> float:
    """AUC of the stored positive soft-label component against ground truth."""
    truth = np.asarray(truth, dtype=np.int64)
    scores = labels_store.s[:, 1]
    if truth.shape != scores.shape:
        raise DimensionError("truth must provide one label per stored instance")
    if restrict_to_positive_bags:
        if positive_bag_mask is None:
            positive_bag_mask = ~labels_store.negative_mask
        scores = scores[positive_bag_mask]
        truth = truth[positive_bag_mask]
    return roc_auc(scores, truth).auc


@dataclass
class EvalReport:
    instance: RocResult | None
    bag: RocResult
    per_bag_scores: list[tuple[int, float, int]]  # (bag_id, score, label)

    def to_dict(self) -> dict:
        return {
            "instance": self.instance.to_dict() if self.instance else None,
            "bag": self.bag.to_dict(),
            "per_bag_scores": [
                {"bag_id": b, "score": s, "label": l}
                for b, s, l in self.per_bag_scores
            ],
        }


def evaluate(state: "TrainState", ds: MilDataset,
             restrict_instance_to_positive_bags: bool = False) -> EvalReport:
    """Instance metrics (when truth is present) plus mean-pooled bag metrics."""
    flat = ds.flatten()
    probs = predict_instances(state, ds)
    instance_result = None
    if flat.truth is not None:
        scores, truth = probs, flat.truth
        if restrict_instance_to_positive_bags:
            mask = flat.bag_labels == 1
            scores, truth = scores[mask], truth[mask]
        instance_result = roc_auc(scores, truth)
    uniq, bag_scores = predict_bags(probs, flat.bag_ids,
                                    all_bag_ids=[b.bag_id for b in ds.bags])
    label_by_id = {b.bag_id: b.label for b in ds.bags}
    bag_labels = np.asarray([label_by_id[int(b)] for b in uniq], dtype=np.int64)
    bag_result = roc_auc(bag_scores, bag_labels)
    per_bag = [(int(b), float(s), int(l))
               for b, s, l in zip(uniq, bag_scores, bag_labels)]
    return EvalReport(instance=instance_result, bag=bag_result,
                      per_bag_scores=per_bag)


def export_score_map(ds: MilDataset, instance_probs: np.ndarray,
                     out_dir) -> list[str]:
    """Write one CSV and one SVG heatmap per bag of a grid dataset.

    The CSV holds (row, col, probability[, truth]); the SVG renders the
    probability grid with an outline enclosing the truth-positive cells when
    truth is available.  Returns the written paths.
    """
    side_str = ds.metadata.get("grid_side")
    if ds.metadata.get("generator") != "grid" or side_str is None:
        raise UsageError("score maps require a grid-generated dataset "
                         "(metadata lacks grid_side)")
    side = int(side_str)
    instance_probs = np.asarray(instance_probs, dtype=np.float64)
    if instance_probs.shape[0] != ds.n_instances():
        raise DimensionError("one probability per instance is required")
    from .plots import render_score_map  # deferred: pulls in matplotlib

    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    offset = 0
    for bag in ds.bags:
        n = len(bag.instances)
        probs = instance_probs[offset:offset + n]
        offset += n
        truths = [inst.truth_label for inst in bag.instances]
        have_truth = all(t is not None for t in truths)
        csv_path = os.path.join(out_dir, f"bag_{bag.bag_id:04d}_map.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = ["row", "col", "probability"] + (["truth"] if have_truth else [])
            writer.writerow(header)
            for j in range(n):
                row, col = divmod(j, side)
                record = [row, col, repr(float(probs[j]))]
                if have_truth:
                    record.append(truths[j])
                writer.writerow(record)
        written.append(csv_path)
        prob_grid = probs.reshape(side, side)
        truth_grid = (np.asarray(truths, dtype=np.int64).reshape(side, side)
                      if have_truth else None)
        svg_path = os.path.join(out_dir, f"bag_{bag.bag_id:04d}_map.svg")
        render_score_map(prob_grid, truth_grid, svg_path,
                         title=f"bag {bag.bag_id} (label {bag.label})")
        written.append(svg_path)
    return written
