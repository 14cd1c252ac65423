"""Segmentation metrics: Dice similarity and the 95th-percentile Hausdorff distance."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage


class EmptyMaskWarning(UserWarning):
    pass


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks score 1."""
    pred, gt = _binary_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    mask = np.asarray(mask).astype(bool)
    cross = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=cross, border_value=0)


def boundary_distances(pred, gt) -> np.ndarray:
    """Pooled directed distances from each boundary pixel of one mask to the other's boundary."""
    pred, gt = _binary_pair(pred, gt)
    bp, bg = boundary(pred), boundary(gt)
    to_gt = ndimage.distance_transform_edt(~bg)
    to_pred = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_gt[bp], to_pred[bg]])


def hd95(pred, gt) -> float:
    """95th percentile (linear interpolation) of the pooled boundary distances, in pixels.

    If either mask is empty the image diagonal is returned and a warning issued.
    """
    pred, gt = _binary_pair(pred, gt)
    if not pred.any() or not gt.any():
        warnings.warn("hd95 on an empty mask; returning the image diagonal", EmptyMaskWarning,
                      stacklevel=2)
        return float(np.sqrt(sum(s * s for s in pred.shape)))
    return float(np.percentile(boundary_distances(pred, gt), 95))


def hausdorff(pred, gt) -> float:
    pred, gt = _binary_pair(pred, gt)
    return float(boundary_distances(pred, gt).max())


def per_class_scores(pred_map, gt_map, num_classes: int) -> tuple[list[float], list[float]]:
    """(dsc, hd95) for each foreground class 1..num_classes-1 of two label maps."""
    pred_map = np.asarray(pred_map)
    gt_map = np.asarray(gt_map)
    dsc, hd = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMaskWarning)
        for c in range(1, num_classes):
            dsc.append(dice_score(pred_map == c, gt_map == c))
            hd.append(hd95(pred_map == c, gt_map == c))
    return dsc, hd
