"""Evaluation metrics for all task kinds, plus the ablation AVG summary.

Conventions pinned here so tests can be exact: F1 with a 0/0 division is 0;
CCC uses population (1/N) moments; Euler errors are wrapped to (-pi, pi].
"""
from __future__ import annotations

import csv

import numpy as np

from .rotation import matrix_to_euler_zyx


def _check_nonempty(*arrays):
    for a in arrays:
        if np.asarray(a).size == 0:
            raise ValueError("metric input is empty")


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label."""
    _check_nonempty(logits, labels)
    logits = np.asarray(logits)
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))


def per_class_f1(pred_labels: np.ndarray, true_labels: np.ndarray, n_classes: int) -> np.ndarray:
    """One-vs-rest F1 per class from hard label predictions."""
    _check_nonempty(pred_labels, true_labels)
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    out = np.zeros(n_classes)
    for k in range(n_classes):
        tp = np.sum((pred == k) & (true == k))
        fp = np.sum((pred == k) & (true != k))
        fn = np.sum((pred != k) & (true == k))
        denom = 2 * tp + fp + fn
        out[k] = 0.0 if denom == 0 else 2.0 * tp / denom
    return out


def per_label_f1(pred_bits: np.ndarray, true_bits: np.ndarray) -> np.ndarray:
    """Binary F1 per label column for multi-label predictions."""
    _check_nonempty(pred_bits, true_bits)
    pred = np.asarray(pred_bits).astype(int)
    true = np.asarray(true_bits).astype(int)
    if pred.shape != true.shape:
        raise ValueError(f"per_label_f1: shape mismatch {pred.shape} vs {true.shape}")
    K = pred.shape[-1]
    out = np.zeros(K)
    for k in range(K):
        tp = np.sum((pred[:, k] == 1) & (true[:, k] == 1))
        fp = np.sum((pred[:, k] == 1) & (true[:, k] == 0))
        fn = np.sum((pred[:, k] == 0) & (true[:, k] == 1))
        denom = 2 * tp + fp + fn
        out[k] = 0.0 if denom == 0 else 2.0 * tp / denom
    return out


def mean_accuracy(pred_bits: np.ndarray, true_bits: np.ndarray) -> float:
    """Mean over all (sample, label) cells of binary agreement."""
    _check_nonempty(pred_bits, true_bits)
    return float(np.mean(np.asarray(pred_bits).astype(int) == np.asarray(true_bits).astype(int)))


def mae(preds: np.ndarray, targets: np.ndarray) -> float:
    _check_nonempty(preds, targets)
    return float(np.mean(np.abs(np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64))))


def ccc(x: np.ndarray, y: np.ndarray) -> float:
    """Concordance correlation: 2*cov / (var_x + var_y + (mean_x - mean_y)^2)."""
    _check_nonempty(x, y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ccc: shape mismatch {x.shape} vs {y.shape}")
    mx, my = x.mean(), y.mean()
    cov = np.mean((x - mx) * (y - my))
    denom = x.var() + y.var() + (mx - my) ** 2
    if denom == 0.0:
        return 1.0 if mx == my else 0.0
    return float(2.0 * cov / denom)


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(a), np.cos(a))


def euler_angles(Rs: np.ndarray) -> np.ndarray:
    """(N, 3) array of (yaw, pitch, roll) per rotation."""
    Rs = np.asarray(Rs)
    return np.array([matrix_to_euler_zyx(R) for R in Rs.reshape(-1, 3, 3)])


def euler_mae(R_preds: np.ndarray, R_trues: np.ndarray) -> float:
    """Mean absolute wrapped error over yaw, pitch, roll."""
    _check_nonempty(R_preds, R_trues)
    ep = euler_angles(R_preds)
    et = euler_angles(R_trues)
    return float(np.mean(np.abs(_wrap_angle(ep - et))))


def avg_score(per_task_scores) -> float:
    """Arithmetic mean of per-task scores in [0, 1], reported x100."""
    scores = np.asarray(list(per_task_scores), dtype=np.float64)
    _check_nonempty(scores)
    if np.any(scores < 0.0) or np.any(scores > 1.0):
        raise ValueError("avg_score expects scores in [0, 1]")
    return float(100.0 * scores.mean())


def write_metrics_csv(path, rows):
    """Write (task, metric, value) rows as RFC-4180 CSV with a header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "metric", "value"])
        for task, metric, value in rows:
            w.writerow([task, metric, repr(float(value))])
