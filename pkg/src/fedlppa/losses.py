"""Weakly-supervised segmentation objective.

Probability maps are NCHW tensors (channel softmax already applied); sparse
labels are (N, H, W) integer maps using ``UNLABELED`` for unsupervised pixels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .weak_labels import UNLABELED

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    lambda_m_range: tuple[float, float] = (0.7, 1.0)
    dice_smooth: float = DICE_SMOOTH

    def __post_init__(self):
        lo, hi = self.lambda_m_range
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"bad lambda_m range {self.lambda_m_range}")


def _as_batch(label) -> np.ndarray:
    label = np.asarray(label)
    return label[None] if label.ndim == 2 else label


def partial_cross_entropy(probs: Tensor, label) -> Tensor:
    """Mean of -log p(y) over labeled pixels; UNLABELED pixels are never read.

    A batch without any labeled pixel yields a zero loss and a logged warning.
    """
    label = _as_batch(label)
    if probs.ndim == 3:
        probs = T.reshape(probs, (1,) + probs.shape)
    if label.shape != probs.shape[:1] + probs.shape[2:]:
        raise ValueError(f"label shape {label.shape} does not match probs {probs.shape}")
    n_idx, h_idx, w_idx = np.nonzero(label != UNLABELED)
    if n_idx.size == 0:
        log.warning("partial_cross_entropy: batch has no labeled pixels, loss set to 0")
        return T.mul(T.sum_(probs), 0.0)
    cls = label[n_idx, h_idx, w_idx].astype(np.intp)
    if cls.max() >= probs.shape[1]:
        raise ValueError("label class id exceeds number of channels")
    picked = T.getitem(probs, (n_idx, cls, h_idx, w_idx))
    return T.mul(T.mean(T.log(T.clamp(picked, lo=LOG_CLAMP))), -1.0)


def dice_loss(probs: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss averaged over foreground classes, pooled over the batch."""
    target = _as_batch(target)
    if probs.ndim == 3:
        probs = T.reshape(probs, (1,) + probs.shape)
    n_cls = probs.shape[1]
    if target.shape != probs.shape[:1] + probs.shape[2:]:
        raise ValueError(f"target shape {target.shape} does not match probs {probs.shape}")
    if np.any(target == UNLABELED):
        raise ValueError("dice target must be dense")
    classes = np.arange(1, n_cls) if n_cls > 1 else np.arange(1)
    onehot = (target[:, None] == classes[None, :, None, None]).astype(probs.dtype)
    p = probs if n_cls == 1 else T.getitem(probs, (slice(None), slice(1, None)))
    axes = (0, 2, 3)
    inter = T.sum_(T.mul(p, onehot), axis=axes)
    denom = T.add(T.sum_(p, axis=axes), onehot.sum(axis=axes) + smooth)
    dice = T.div(T.add(T.mul(inter, 2.0), smooth), denom)
    return T.mean(T.sub(1.0, dice))


def sample_lambda_m(rng: np.random.Generator, cfg: LossConfig = LossConfig()) -> float:
    lo, hi = cfg.lambda_m_range
    return float(rng.uniform(lo, hi))


def pseudo_label(p_main, p_aux, rng: np.random.Generator | None = None,
                 lambda_m: float | None = None, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Dense argmax of the stochastic mixture of both decoders (no gradient).

    ``lambda_m`` overrides the draw from ``rng``; ties resolve to the lowest class.
    """
    pm = p_main.data if isinstance(p_main, Tensor) else np.asarray(p_main)
    pa = p_aux.data if isinstance(p_aux, Tensor) else np.asarray(p_aux)
    if pm.shape != pa.shape:
        raise ValueError(f"pseudo_label shape mismatch {pm.shape} vs {pa.shape}")
    if lambda_m is None:
        if rng is None:
            raise ValueError("pseudo_label needs an rng or an explicit lambda_m")
        lambda_m = sample_lambda_m(rng, cfg)
    mix = lambda_m * pm + (1.0 - lambda_m) * pa
    axis = 1 if mix.ndim == 4 else 0
    return np.argmax(mix, axis=axis).astype(np.uint8)


def wss_objective(p_main: Tensor, p_aux: Tensor | None, label, cfg: LossConfig = LossConfig(),
                  rng: np.random.Generator | None = None, lambda_m: float | None = None) -> Tensor:
    """Supervised pCE on both heads plus lambda-weighted Dice on the shared pseudo-label.

    With ``p_aux=None`` (single-decoder variants) the pseudo-label is the main
    head's own argmax and each term uses the main head alone.
    """
    if p_aux is None:
        target = np.argmax(p_main.data, axis=1 if p_main.ndim == 4 else 0).astype(np.uint8)
        sup = partial_cross_entropy(p_main, label)
        if cfg.lam == 0:
            return sup
        return T.add(sup, T.mul(dice_loss(p_main, target, cfg.dice_smooth), cfg.lam))
    target = pseudo_label(p_main, p_aux, rng, lambda_m, cfg)
    sup = T.mul(T.add(partial_cross_entropy(p_main, label), partial_cross_entropy(p_aux, label)), 0.5)
    if cfg.lam == 0:
        return sup
    dice = T.mul(T.add(dice_loss(p_main, target, cfg.dice_smooth),
                       dice_loss(p_aux, target, cfg.dice_smooth)), 0.5)
    return T.add(sup, T.mul(dice, cfg.lam))
