"""Balanced-accuracy metrics, soft-voting ensemble and reporting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, labels, predictions) -> "ConfusionCounts":
        labels = np.asarray(labels)
        predictions = np.asarray(predictions)
        if labels.shape != predictions.shape:
            raise ValueError("labels and predictions must have equal length")
        return cls(
            tp=int(np.sum((labels == 1) & (predictions == 1))),
            fn=int(np.sum((labels == 1) & (predictions == 0))),
            tn=int(np.sum((labels == 0) & (predictions == 0))),
            fp=int(np.sum((labels == 0) & (predictions == 1))),
        )


def balanced_accuracy(c: ConfusionCounts) -> float:
    """Mean of the two per-class recalls."""
    if c.tp + c.fn == 0 or c.tn + c.fp == 0:
        raise ValueError("balanced accuracy undefined with an empty class")
    return (c.tp / (c.tp + c.fn) + c.tn / (c.tn + c.fp)) / 2


def soft_vote(probs_a, probs_b) -> tuple[np.ndarray, int]:
    """Average two probability vectors; ties go to class 0 (non-target)."""
    probs_a = np.asarray(probs_a, dtype=np.float64)
    probs_b = np.asarray(probs_b, dtype=np.float64)
    if probs_a.shape != probs_b.shape:
        raise ValueError("voter probability vectors must have equal length")
    mean = (probs_a + probs_b) / 2
    label = 0 if mean[0] >= mean[1] else 1
    return mean, label


def soft_vote_batch(probs_a: np.ndarray, probs_b: np.ndarray) -> np.ndarray:
    """Vectorized soft vote over (N, 2) probability arrays -> (N,) labels."""
    mean = (np.asarray(probs_a) + np.asarray(probs_b)) / 2
    return (mean[:, 1] > mean[:, 0]).astype(np.int64)


def evaluate_transfer(generator, target_classifier, source_classifier,
                      test_features, train_indices=None, test_indices=None) -> dict:
    """Ensemble evaluation of one test split.

    Each test sample x_T is pushed through the generator; the source
    classifier scores the generated sample, the target classifier scores the
    original, and the two probability vectors are soft-voted. When both index
    sets are given, any overlap (train/test leakage) aborts the evaluation.

    Returns a dict with the ensemble and per-voter balanced accuracies plus
    the raw probabilities.
    """
    import torch

    if train_indices is not None and test_indices is not None:
        overlap = set(np.asarray(train_indices).tolist()) & set(np.asarray(test_indices).tolist())
        if overlap:
            raise RuntimeError(f"train/test leakage detected: shared indices {sorted(overlap)[:5]}")

    values = torch.as_tensor(test_features.values, dtype=torch.float32)
    labels = np.asarray(test_features.labels)
    generator.eval()
    target_classifier.eval()
    source_classifier.eval()
    with torch.no_grad():
        probs_target = torch.softmax(target_classifier(values), dim=1).numpy()
        generated = generator(values)
        probs_source = torch.softmax(source_classifier(generated), dim=1).numpy()
    ensemble_preds = soft_vote_batch(probs_source, probs_target)
    result = {
        "ensemble": balanced_accuracy(ConfusionCounts.from_predictions(labels, ensemble_preds)),
        "target_only": balanced_accuracy(
            ConfusionCounts.from_predictions(labels, probs_target.argmax(axis=1))),
        "source_on_generated": balanced_accuracy(
            ConfusionCounts.from_predictions(labels, probs_source.argmax(axis=1))),
        "probs_target": probs_target,
        "probs_source": probs_source,
    }
    return result


@dataclass
class TransferReport:
    """Per-fold balanced accuracies for one (target, source) experiment."""

    target_subject: str
    source_subject: str
    variant: str
    fold_accuracies: list[float]
    baseline_accuracies: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies))

    @property
    def baseline_mean(self) -> float:
        return float(np.mean(self.baseline_accuracies)) if self.baseline_accuracies else float("nan")

    @property
    def negative_transfer(self) -> bool:
        if not self.baseline_accuracies:
            return False
        return self.mean < self.baseline_mean

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            mean=self.mean,
            std=self.std,
            baseline_mean=self.baseline_mean,
            negative_transfer=self.negative_transfer,
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransferReport":
        return cls(
            target_subject=d["target_subject"],
            source_subject=d["source_subject"],
            variant=d["variant"],
            fold_accuracies=list(d["fold_accuracies"]),
            baseline_accuracies=list(d.get("baseline_accuracies", [])),
            config=d.get("config", {}),
        )


def select_golden_subject(accuracy_table: dict) -> str:
    """Pick the subject with the best mean accuracy across classifiers.

    ``accuracy_table`` maps subject_id -> iterable of per-classifier
    accuracies (or classifier -> accuracy mapping). Ties break toward the
    smaller row std, then the lexically smaller subject id.
    """
    if not accuracy_table:
        raise ValueError("accuracy table is empty")
    rows = []
    for subject, accs in accuracy_table.items():
        values = list(accs.values()) if isinstance(accs, dict) else list(accs)
        if not values:
            raise ValueError(f"subject {subject} has no accuracies")
        rows.append((-float(np.mean(values)), float(np.std(values)), subject))
    rows.sort()
    return rows[0][2]


def save_reports(reports: list[TransferReport], out_dir,
                 golden_subjects: set | None = None) -> tuple[Path, Path]:
    """Write one aggregated CSV and a JSON mirror with per-fold detail.

    Rows are sorted by (target subject, variant); golden subjects carry a
    '*' marker in the CSV.
    """
    if not reports:
        raise ValueError("no reports to write")
    golden_subjects = golden_subjects or set()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(reports, key=lambda r: (r.target_subject, r.variant))

    csv_path = out_dir / "report.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "source", "variant", "mean", "std",
                         "baseline_mean", "negative_transfer"])
        for r in ordered:
            target = r.target_subject + ("*" if r.target_subject in golden_subjects else "")
            writer.writerow([
                target, r.source_subject, r.variant,
                f"{r.mean:.6f}", f"{r.std:.6f}",
                "" if np.isnan(r.baseline_mean) else f"{r.baseline_mean:.6f}",
                r.negative_transfer,
            ])

    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps([r.to_dict() for r in ordered], indent=1))
    return csv_path, json_path
