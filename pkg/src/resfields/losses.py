"""Task losses with their gradients (mean over every element)."""

import numpy as np

MAPE_EPS = 1e-2


def _check(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def loss_mse(pred, target):
    pred, target = _check(pred, target)
    return float(np.mean((pred - target) ** 2))


def loss_mape(pred, target, eps=MAPE_EPS):
    pred, target = _check(pred, target)
    return float(np.mean(np.abs(pred - target) / (np.abs(target) + eps)))


def loss_l1(pred, target):
    pred, target = _check(pred, target)
    return float(np.mean(np.abs(pred - target)))


def loss_and_grad(kind, pred, target, eps=MAPE_EPS):
    """Return ``(loss, d loss / d pred)``."""
    pred, target = _check(pred, target)
    diff = pred - target
    n = diff.size
    if kind == "mse":
        return float(np.mean(diff * diff)), (2.0 / n) * diff
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    if kind == "mape":
        w = 1.0 / (np.abs(target) + eps)
        return float(np.mean(np.abs(diff) * w)), np.sign(diff) * w / n
    raise ValueError(f"unknown loss {kind!r}")
