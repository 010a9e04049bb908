"""Classification metrics and full-model evaluation."""

from __future__ import annotations

import numpy as np

from sflsim.model_core import FrozenStack, LoraAdapter, forward_partial

__all__ = ["accuracy", "macro_f1", "evaluate"]


def accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    if y_true.shape != y_pred.shape:
        raise ValueError("label arrays differ in shape")
    return float(np.mean(y_true == y_pred))


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no predictions and no
    true samples contributes 0, keeping rare-class collapse visible."""
    if y_true.shape != y_pred.shape:
        raise ValueError("label arrays differ in shape")
    scores = []
    for k in range(num_classes):
        tp = float(np.sum((y_pred == k) & (y_true == k)))
        fp = float(np.sum((y_pred == k) & (y_true != k)))
        fn = float(np.sum((y_pred != k) & (y_true == k)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def evaluate(
    stack: FrozenStack,
    adapters: list[LoraAdapter],
    eval_split: tuple[np.ndarray, np.ndarray],
) -> tuple[float, float]:
    """Accuracy and macro-F1 of the full model on a held-out split."""
    x, y = eval_split
    n_stages = stack.num_layers + 2
    logits = forward_partial(stack, adapters, 0, n_stages, x).output
    preds = logits.argmax(axis=1)
    return accuracy(y, preds), macro_f1(y, preds, stack.head.shape[1])
