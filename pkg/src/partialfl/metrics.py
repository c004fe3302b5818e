"""Evaluation metrics: unweighted average recall, top-k accuracy, confusion matrix."""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def _check_lengths(predictions: np.ndarray, labels: np.ndarray) -> None:
    if predictions.shape[0] != labels.shape[0]:
        raise ValueError(f"length mismatch: {predictions.shape[0]} predictions vs {labels.shape[0]} labels")
    if labels.shape[0] == 0:
        raise ValueError("cannot score an empty evaluation set")


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_lengths(predictions, labels)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return counts


def uar(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-class recall over the classes that occur in ``labels``.

    Classes absent from ``labels`` have no defined recall and are left out.
    The mean is taken over exact fractions and rounded once, so the result
    does not depend on class order.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_lengths(predictions, labels)
    c = int(max(predictions.max(), labels.max())) + 1
    cm = confusion_matrix(predictions, labels, c)
    support = cm.sum(axis=1)
    recalls = [Fraction(int(cm[i, i]), int(support[i])) for i in range(c) if support[i] > 0]
    return float(sum(recalls) / len(recalls))


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Share of rows whose label ranks in the k highest logits.

    Equal logits rank the lower class index first.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError("logits must be [N, C]")
    _check_lengths(logits, labels)
    c = logits.shape[1]
    if not 1 <= k <= c:
        raise ValueError(f"k must lie in [1, {c}], got {k}")
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    _check_lengths(predictions, labels)
    return float(np.mean(predictions == labels))


def evaluate_logits(logits: np.ndarray, labels: np.ndarray, names: list[str]) -> dict[str, float]:
    """Compute the named metrics: ``uar``, ``accuracy`` or ``top<k>``."""
    out = {}
    preds = np.argsort(-np.asarray(logits), axis=1, kind="stable")[:, 0]
    for name in names:
        if name == "uar":
            out[name] = uar(preds, labels)
        elif name == "accuracy":
            out[name] = accuracy(preds, labels)
        elif name.startswith("top") and name[3:].isdigit():
            out[name] = top_k_accuracy(logits, labels, int(name[3:]))
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out
