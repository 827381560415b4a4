import numpy as np
import pytest

from sslseg import metrics


def test_dice_score_examples():
    P = np.zeros((2, 2), int)
    G = np.zeros((2, 2), int)
    P[0, 0] = P[0, 1] = 1
    G[0, 1] = G[1, 1] = 1
    assert metrics.dice_score(P, G, 1) == 0.5
    assert metrics.dice_score(P, P, 1) == 1.0
    assert metrics.dice_score(np.zeros_like(G), G, 1) == 0.0
    # absent from both
    assert metrics.dice_score(P, G, 3) == 1.0


def test_dice_score_symmetry_and_range():
    rng = np.random.default_rng(0)
    for _ in range(10):
        P = rng.integers(0, 3, (8, 8))
        G = rng.integers(0, 3, (8, 8))
        for c in range(3):
            d = metrics.dice_score(P, G, c)
            assert d == metrics.dice_score(G, P, c)
            assert 0 <= d <= 1


def test_dice_score_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        metrics.dice_score(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_volume_dice_accumulates_counts():
    gt = np.zeros((2, 4, 4), int)
    gt[:, :2] = 1
    pred = gt.copy()
    # second slice entirely wrong with the same organ area
    pred[1] = 1 - gt[1]
    assert metrics.volume_dice(pred, gt, [1]) == {1: 0.5}
    assert metrics.volume_dice(gt, gt, [1]) == {1: 1.0}
    assert metrics.volume_dice(pred[::-1], gt[::-1], [1]) == {1: 0.5}
    with pytest.raises(ValueError, match="slices"):
        metrics.volume_dice(pred[:1], gt, [1])
