"""Per-AU F1, subject-independent folds and evaluation reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data.dataset import Sample, eval_batches
from .data.landmarks import AURuleTable


def confusion_counts(pred: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column TP, FP, FN for binary ``(M, N)`` arrays."""
    pred = np.asarray(pred, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    tp = (pred & labels).sum(0)
    fp = (pred & ~labels).sum(0)
    fn = (~pred & labels).sum(0)
    return tp, fp, fn


def f1_from_counts(tp, fp, fn) -> np.ndarray:
    """F1 = 2PR/(P+R); defined as 0 when P+R = 0 (no true positives)."""
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        denom = precision + recall
        return np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)


def f1_per_au(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, float]:
    probs = np.atleast_2d(np.asarray(probs))
    labels = np.atleast_2d(np.asarray(labels))
    f1 = f1_from_counts(*confusion_counts(probs >= threshold, labels > 0.5))
    return f1, float(f1.mean())


def degenerate_aus(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> list[int]:
    """AUs with neither predicted nor actual positives (F1 set to 0)."""
    probs = np.atleast_2d(np.asarray(probs))
    labels = np.atleast_2d(np.asarray(labels))
    tp, fp, fn = confusion_counts(probs >= threshold, labels > 0.5)
    return [int(i) for i in np.flatnonzero(tp + fp + fn == 0)]


def subject_kfold(subject_ids: Sequence[str], k: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Partition distinct subjects into ``k`` test folds (sizes within 1)."""
    subjects = sorted(set(subject_ids))
    if len(subjects) < k:
        raise ValueError(f"need at least {k} subjects for {k}-fold splitting, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    folds = np.array_split(np.array(subjects, dtype=object)[order], k)
    out = []
    for i in range(k):
        test = sorted(folds[i].tolist())
        train = sorted(s for j, f in enumerate(folds) if j != i for s in f.tolist())
        out.append((train, test))
    return out


def split_by_subject(samples: Sequence[Sample], subjects: Sequence[str]) -> list[Sample]:
    keep = set(subjects)
    return [s for s in samples if s.subject_id in keep]


@dataclass
class EvalReport:
    f1: np.ndarray
    average: float
    probs: np.ndarray
    labels: np.ndarray
    names: list[str]
    degenerate: list[int] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [(n, float(v)) for n, v in zip(self.names, self.f1)] + [("Avg.", self.average)]

    def write(self, md_path: str | Path, csv_path: str | Path) -> None:
        rows = self.rows()
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["AU", "F1"])
            for name, val in rows:
                w.writerow([name, f"{100 * val:.1f}"])
        lines = ["| AU | F1 (%) |", "|---|---|"]
        lines += [f"| {name} | {100 * val:.1f} |" for name, val in rows]
        if self.degenerate:
            names = ", ".join(self.names[i] for i in self.degenerate)
            lines += ["", f"F1 set to 0 (no predicted or true positives): {names}"]
        Path(md_path).write_text("\n".join(lines) + "\n")


@torch.no_grad()
def predict_samples(backbone, samples: Sequence[Sample], table: AURuleTable, batch_size: int = 16) -> np.ndarray:
    """Center-crop-only inference, in dataset order."""
    dtype = next(backbone.parameters()).dtype
    crop = backbone.cfg.input_size
    out = []
    for batch in eval_batches(samples, batch_size, table, crop):
        pred = backbone.predict(torch.from_numpy(batch.images).to(dtype), torch.from_numpy(batch.centers))
        out.append(pred.fused_probs.cpu().numpy())
    return np.concatenate(out)


def evaluate(backbone, samples: Sequence[Sample], table: AURuleTable, threshold: float = 0.5,
             batch_size: int = 16) -> EvalReport:
    if any(s.labels is None for s in samples):
        raise ValueError("evaluation needs ground-truth labels on every sample")
    probs = predict_samples(backbone, samples, table, batch_size)
    labels = np.stack([s.labels for s in samples])
    f1, avg = f1_per_au(probs, labels, threshold)
    return EvalReport(f1, avg, probs, labels, list(table.names), degenerate_aus(probs, labels, threshold))
