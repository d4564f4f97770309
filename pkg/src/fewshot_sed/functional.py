"""Small numeric helpers shared by the training and adaptation code."""
from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return p * (grad_p - (p * grad_p).sum(axis=-1, keepdims=True))


def clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits)
    y = one_hot(labels, logits.shape[1])
    n = logits.shape[0]
    loss = float(-(y * clamped_log(p)).sum() / n)
    return loss, (p - y) / n


def l2_normalize(v: np.ndarray, return_flag: bool = False):
    """Scale rows (or a single vector) to unit L2 norm.

    Zero rows are returned unchanged; with ``return_flag`` a boolean mask of
    those degenerate rows is returned alongside.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    degenerate = norm[..., 0] == 0
    out = v / np.where(norm == 0, 1.0, norm)
    if return_flag:
        return out, degenerate
    return out


def l2_normalize_backward(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of rows v/|v| given upstream grad; zero for zero rows."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norm == 0, 1.0, norm)
    u = v / safe
    g = (grad_out - u * (u * grad_out).sum(axis=-1, keepdims=True)) / safe
    return np.where(norm == 0, 0.0, g)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of vector ``a`` against each row of ``b``."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b, axis=-1)
    if na == 0 or np.any(nb == 0):
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return (b @ a) / (nb * na)
