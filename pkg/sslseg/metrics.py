"""
Dice overlap between integer label maps.
"""
import numpy as np


def dice_counts(pred_labels, gt_labels, c):
    """Return (|P ∩ G|, |P|, |G|) for class c."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"pred shape {pred_labels.shape} != gt shape {gt_labels.shape}")
    P = pred_labels == c
    G = gt_labels == c
    return int(np.logical_and(P, G).sum()), int(P.sum()), int(G.sum())


def _dice_from_counts(intersection, n_pred, n_true):
    # both empty: the class is correctly absent
    if n_pred + n_true == 0:
        return 1.0
    return 2.0 * intersection / (n_pred + n_true)


def dice_score(pred_labels, gt_labels, c):
    """
    Dice = 2|P ∩ G| / (|P| + |G|) for the pixels labeled c.

    Args:
        pred_labels (np.ndarray, int): predicted labels.
        gt_labels (np.ndarray, int): ground-truth labels, same shape.
        c (int): class index.

    Returns:
        float: Dice in [0, 1]; 1.0 when the class is absent from both.
    """
    return _dice_from_counts(*dice_counts(pred_labels, gt_labels, c))


def volume_dice(pred_slices, gt_slices, classes):
    """
    Dice for a whole volume, accumulating counts across slices before the ratio.

    Args:
        pred_slices (iterable of np.ndarray): predicted label slices.
        gt_slices (iterable of np.ndarray): ground-truth label slices, same order.
        classes (iterable of int): classes to score.

    Returns:
        dict: class -> Dice.
    """
    classes = list(classes)
    pred_slices, gt_slices = list(pred_slices), list(gt_slices)
    if len(pred_slices) != len(gt_slices):
        raise ValueError(f"{len(pred_slices)} predicted slices vs {len(gt_slices)} labeled")
    counts = np.zeros((len(classes), 3), np.int64)
    for pred, gt in zip(pred_slices, gt_slices):
        for k, c in enumerate(classes):
            counts[k] += dice_counts(pred, gt, c)
    return {c: _dice_from_counts(*counts[k]) for k, c in enumerate(classes)}
