"""Classification metrics: accuracy, macro F1 and macro one-vs-rest AUROC."""

from __future__ import annotations

import numpy as np
from sklearn.metrics import f1_score, roc_auc_score


def accuracy(labels, preds) -> float:
    labels, preds = np.asarray(labels), np.asarray(preds)
    if labels.shape != preds.shape or labels.size == 0:
        raise ValueError("labels and predictions must be non-empty and equally long")
    return float(np.mean(labels == preds))


def f1_macro(labels, preds, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all ``n_classes`` (undefined F1 counts as 0)."""
    return float(f1_score(labels, preds, labels=np.arange(n_classes), average="macro",
                          zero_division=0))


def auroc_macro(labels, scores) -> float:
    """Mean one-vs-rest AUROC over the classes that have both positives and negatives.

    Ties in scores count one half.  Returns 0.5 when no class qualifies.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    per_class = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            continue
        per_class.append(roc_auc_score(pos, scores[:, c]))
    return float(np.mean(per_class)) if per_class else 0.5


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classification_metrics(labels, logits: np.ndarray) -> dict:
    logits = np.asarray(logits)
    preds = logits.argmax(axis=1)
    return {
        "accuracy": accuracy(labels, preds),
        "f1_macro": f1_macro(labels, preds, logits.shape[1]),
        "auroc": auroc_macro(labels, softmax_rows(logits)),
    }
