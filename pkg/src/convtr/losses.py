"""Segmentation losses: per-pixel cross-entropy and its focal reweighting.

The focal loss scales each pixel's cross-entropy by alpha[label] *
(1 - p_t)^gamma, where p_t is the probability assigned to the true class.
With gamma = 0 and unit alpha it reduces exactly to mean cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError
from .tensor import Tensor


@dataclass
class FocalLossConfig:
    alpha: np.ndarray  # per-class weight, length C
    gamma: float = 2.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or np.any(self.alpha <= 0):
            raise ParameterError("alpha must be a vector of positive class weights")
        if self.gamma < 0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")

    @classmethod
    def uniform(cls, classes: int, gamma: float = 2.0) -> "FocalLossConfig":
        return cls(np.ones(classes), gamma)


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classes:
        bad = labels[(labels < 0) | (labels >= classes)].flat[0]
        raise DataError(f"label {bad} outside [0, {classes})")
    return labels.astype(np.int64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _gather_true_class(per_class: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.take_along_axis(per_class, labels[:, None], axis=1)[:, 0]


@dataclass
class CrossEntropyCache:
    logits: np.ndarray
    labels: np.ndarray
    log_probs: np.ndarray


def cross_entropy(logits: Tensor, labels: np.ndarray):
    """Per-pixel negative log-likelihood, shape [N,H,W]."""
    n, c, h, w = logits.data.shape
    labels = _check_labels(labels, c)
    lp = _log_softmax(logits.data.astype(np.float64, copy=False))
    nll = -_gather_true_class(
        lp.transpose(0, 2, 3, 1).reshape(-1, c), labels.reshape(-1)
    ).reshape(n, h, w)
    return Tensor(nll.astype(logits.dtype, copy=False)), CrossEntropyCache(
        logits.data, labels, lp
    )


def cross_entropy_backward(cache: CrossEntropyCache, upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = cache.logits.shape
    probs = np.exp(cache.log_probs)
    onehot = np.zeros_like(probs)
    idx = np.indices((n, h, w))
    onehot[idx[0], cache.labels, idx[1], idx[2]] = 1.0
    g = (probs - onehot) * np.asarray(upstream)[:, None, :, :]
    return g.astype(cache.logits.dtype, copy=False)


@dataclass
class FocalLossCache:
    logits: np.ndarray
    labels: np.ndarray
    log_probs: np.ndarray
    pt: np.ndarray
    alpha_t: np.ndarray
    gamma: float


def focal_loss(logits: Tensor, labels: np.ndarray, cfg: FocalLossConfig):
    """Scalar mean of alpha[label] * (1 - p_t)^gamma * (-log p_t)."""
    n, c, h, w = logits.data.shape
    labels = _check_labels(labels, c)
    if cfg.alpha.shape[0] != c:
        raise ParameterError(f"alpha has {cfg.alpha.shape[0]} entries for {c} classes")
    lp = _log_softmax(logits.data.astype(np.float64, copy=False))
    flat_labels = labels.reshape(-1)
    log_pt = _gather_true_class(lp.transpose(0, 2, 3, 1).reshape(-1, c), flat_labels)
    pt = np.exp(log_pt)
    alpha_t = cfg.alpha[flat_labels]
    per_pixel = alpha_t * (1.0 - pt) ** cfg.gamma * (-log_pt)
    loss = per_pixel.mean()
    return Tensor(np.asarray(loss, dtype=logits.dtype)), FocalLossCache(
        logits.data, labels, lp, pt, alpha_t, cfg.gamma
    )


def focal_loss_backward(cache: FocalLossCache, upstream: float = 1.0) -> np.ndarray:
    n, c, h, w = cache.logits.shape
    pt, gamma = cache.pt, cache.gamma
    ce = -_gather_true_class(
        cache.log_probs.transpose(0, 2, 3, 1).reshape(-1, c), cache.labels.reshape(-1)
    )
    one_minus = 1.0 - pt
    # dL/dpt; the gamma term vanishes in the limit pt -> 1 (ce -> 0 first)
    if gamma == 0.0:
        dl_dpt = -cache.alpha_t / pt
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            focal_term = np.where(
                one_minus > 0.0, gamma * ce * one_minus ** (gamma - 1.0), 0.0
            )
        dl_dpt = -cache.alpha_t * (focal_term + one_minus**gamma / pt)

    probs = np.exp(cache.log_probs)
    # dpt/dz_j = pt * (1{j=t} - p_j); mean reduction spreads 1/(N*H*W)
    coeff = (dl_dpt * pt * upstream / (n * h * w)).reshape(n, h, w)
    g = -probs * coeff[:, None, :, :]
    idx = np.indices((n, h, w))
    g[idx[0], cache.labels, idx[1], idx[2]] += coeff
    return g.astype(cache.logits.dtype, copy=False)
