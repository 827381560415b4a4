import math

import numpy as np
import pytest
import torch

from sslseg import contrastive, models
from sslseg.contrastive import (ContrastiveConfig, EmbeddingBatch, contrastive_loss,
                                cosine_similarity, make_positive_pair, sample_local_patch_pairs)
from sslseg.train import ScheduleConfig
from sslseg.transforms import AugmentationConfig, ViewGeometry


def test_cosine_similarity_examples():
    assert cosine_similarity([1., 2.], [1., 2.]) == pytest.approx(1.)
    assert cosine_similarity([1., 0.], [0., 3.]) == pytest.approx(0.)
    assert cosine_similarity([3., 4.], [4., 3.]) == pytest.approx(0.96, abs=1e-12)
    with pytest.raises(ValueError, match="zero vector"):
        cosine_similarity([0., 0.], [1., 0.])


@pytest.mark.parametrize("N", [2, 4, 16])
def test_equal_similarities_give_log_n(N):
    v = torch.ones(N, 3, dtype=torch.float64)
    loss = contrastive_loss(EmbeddingBatch(v, v.clone()), temperature=0.1)
    assert abs(loss.item() - math.log(N)) < 1e-9


def test_two_vector_example():
    anchors = torch.tensor([[1., 0.]], dtype=torch.float64)
    positives = torch.tensor([[1., 0.], [0., 1.]], dtype=torch.float64)
    loss = contrastive_loss(EmbeddingBatch(anchors, positives), temperature=0.1)
    assert abs(loss.item() - math.log1p(math.exp(-10.))) < 1e-12


def test_scale_invariance_and_bounds():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(6, 5, generator=g, dtype=torch.float64)
    p = torch.randn(6, 5, generator=g, dtype=torch.float64)
    loss = contrastive_loss(EmbeddingBatch(a, p), 0.1)
    scaled = contrastive_loss(EmbeddingBatch(3.5 * a, 3.5 * p), 0.1)
    assert abs(loss.item() - scaled.item()) < 1e-12
    assert 0 < loss.item() <= math.log(6) + 2 / 0.1


def test_monotone_in_positive_similarity():
    negatives = torch.tensor([[0., 1.], [-1., 0.]], dtype=torch.float64)
    anchor = torch.tensor([[1., 0.]], dtype=torch.float64)
    losses = []
    for angle in (1.2, 0.8, 0.4, 0.):
        pos = torch.tensor([[math.cos(angle), math.sin(angle)]], dtype=torch.float64)
        batch = EmbeddingBatch(anchor, torch.cat((pos, negatives)))
        losses.append(contrastive_loss(batch, 0.1).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_large_logits_are_stable():
    v = torch.eye(4, dtype=torch.float64)
    loss = contrastive_loss(EmbeddingBatch(v, v.clone()), temperature=1e-3)
    assert torch.isfinite(loss)


def test_contrastive_loss_errors():
    one = torch.ones(1, 3)
    with pytest.raises(ValueError, match="at least 2"):
        contrastive_loss(EmbeddingBatch(one, one), 0.1)
    with pytest.raises(ValueError, match="temperature"):
        contrastive_loss(EmbeddingBatch(torch.ones(2, 3), torch.ones(2, 3)), 0.)
    with pytest.raises(ValueError, match="paired"):
        contrastive_loss(EmbeddingBatch(torch.ones(1, 3), torch.ones(2, 3)), 0.1,
                         symmetric=True)


@pytest.mark.parametrize("seed", range(10))
def test_contrastive_gradient(seed, float64, grad_error):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(4, 3, generator=g)
    p = torch.randn(4, 3, generator=g)
    for symmetric in (False, True):
        fn = lambda x, y: contrastive_loss(EmbeddingBatch(x, y), 0.5, symmetric=symmetric)
        assert grad_error(fn, [a, p]) < 1e-4


def test_make_positive_pair_identity_and_determinism(rng):
    x = rng.random((1, 16, 16)).astype(np.float32)
    identity = AugmentationConfig(crop_scale=(1., 1.), brightness_delta=(0., 0.),
                                  contrast_factor=(1., 1.))
    va, vb, (ga, gb) = make_positive_pair(x, identity, np.random.default_rng(0))
    assert np.array_equal(va, x) and np.array_equal(vb, x)
    assert ga == ViewGeometry(0, 0, 16, 16)
    a = make_positive_pair(x, AugmentationConfig(), np.random.default_rng(3))
    b = make_positive_pair(x, AugmentationConfig(), np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]
    assert a[0].min() >= 0 and a[0].max() <= 1


def test_brightness_on_constant_image():
    x = np.full((8, 8), 0.9, np.float32)
    aug = AugmentationConfig(crop_scale=(1., 1.), brightness_delta=(0.2, 0.2),
                             contrast_factor=(1., 1.))
    va, _, _ = make_positive_pair(x, aug, np.random.default_rng(0))
    assert np.all(va == 1.)


def test_local_patch_pairs_identical_maps():
    g = torch.Generator().manual_seed(0)
    m = torch.randn(2, 4, 9, 9, generator=g)
    config = ContrastiveConfig(local_patch_size=3, local_patches_per_image=5)
    batch = sample_local_patch_pairs(m, m.clone(), None, config, np.random.default_rng(0))
    assert batch.anchors.shape == (10, 4)
    assert torch.allclose((batch.anchors * batch.positives).sum(dim=1), torch.ones(10))
    assert torch.allclose(batch.anchors.norm(dim=1), torch.ones(10), atol=1e-5)


def test_local_patch_pairs_constant_maps_give_log_n():
    m = torch.ones(2, 4, 6, 6, dtype=torch.float64)
    config = ContrastiveConfig(local_patch_size=3, local_patches_per_image=4)
    batch = sample_local_patch_pairs(m, m.clone(), None, config, np.random.default_rng(0))
    loss = contrastive_loss(batch, 0.1)
    assert abs(loss.item() - math.log(8)) < 1e-9


def test_local_patch_pairs_count_error():
    m = torch.zeros(1, 2, 6, 6)
    config = ContrastiveConfig(local_patch_size=3, local_patches_per_image=5)
    with pytest.raises(ValueError, match="non-overlapping"):
        sample_local_patch_pairs(m, m, None, config, np.random.default_rng(0))


def test_local_patch_pairs_follow_crop_geometry():
    # view b is view a shifted three source pixels to the right
    g = torch.Generator().manual_seed(1)
    source = torch.randn(1, 3, 6, 12, generator=g, dtype=torch.float64)
    map_a, map_b = source[..., 0:6], source[..., 3:9]
    geometry = [(ViewGeometry(0, 0, 6, 6), ViewGeometry(0, 3, 6, 6))]
    config = ContrastiveConfig(local_patch_size=3, local_patches_per_image=2)
    batch = sample_local_patch_pairs(map_a, map_b, geometry, config, np.random.default_rng(2))
    assert batch.anchors.shape == (2, 3)
    assert torch.allclose(batch.anchors, batch.positives)
    config = ContrastiveConfig(local_patch_size=3, local_patches_per_image=3)
    with pytest.raises(ValueError, match="overlap"):
        sample_local_patch_pairs(map_a, map_b, geometry, config, np.random.default_rng(2))


def test_local_patch_pairs_geometry_overlap_error():
    m = torch.rand(1, 2, 6, 6)
    config = ContrastiveConfig(local_patch_size=3, local_patches_per_image=4)
    # the views do not overlap at all, so no location can be matched
    geometry = [(ViewGeometry(0, 0, 2, 2), ViewGeometry(4, 4, 2, 2))]
    with pytest.raises(ValueError, match="overlap"):
        sample_local_patch_pairs(m, m, geometry, config, np.random.default_rng(0))


def test_pretrain_contrastive_stages_and_freeze(tiny_config, monkeypatch):
    data = np.random.default_rng(0).random((4, 1, 16, 16)).astype(np.float32)
    cconfig = ContrastiveConfig(batch_size=2, local_patches_per_image=2, freeze_encoder=True)
    schedule = ScheduleConfig(epochs=1)

    net = models.build_model(tiny_config, rng_seed=0)
    stage_one_end = []
    original = contrastive._train_stage

    def spy(net_, data_, stage, *args):
        if stage == "local":
            stage_one_end.extend(p.detach().clone() for p in net_.encoder_parameters())
        return original(net_, data_, stage, *args)

    monkeypatch.setattr(contrastive, "_train_stage", spy)
    net, histories = contrastive.pretrain_contrastive(net, data, cconfig,
                                                      AugmentationConfig(), schedule)
    assert set(histories) == {"global", "local"}
    assert len(histories["global"]["train_loss"]) == 1
    assert len(histories["local"]["train_loss"]) == 1
    assert net.head_mode == "local"
    assert stage_one_end
    for before, p in zip(stage_one_end, net.encoder_parameters()):
        assert p.detach().numpy().tobytes() == before.numpy().tobytes()
        assert p.requires_grad


def test_pretrain_contrastive_initial_loss_near_log_n(tiny_config):
    net = models.swap_heads(models.build_model(tiny_config, rng_seed=0), "global", seed=0)
    x = torch.from_numpy(np.random.default_rng(0).random((8, 1, 16, 16)).astype(np.float32))
    z = models.forward_global_embedding(net, x)
    zb = models.forward_global_embedding(net, x.flip(-1))
    loss = contrastive_loss(EmbeddingBatch(z, zb), 0.1, symmetric=True).item()
    assert abs(loss - math.log(8)) < 0.3 * math.log(8)


def test_pretrain_contrastive_errors(tiny_net):
    with pytest.raises(ValueError, match="batch_size"):
        contrastive.pretrain_contrastive(tiny_net, np.zeros((4, 1, 16, 16), np.float32),
                                         ContrastiveConfig(batch_size=1))
    with pytest.raises(ValueError, match="at least 2"):
        contrastive.pretrain_contrastive(tiny_net, np.zeros((1, 1, 16, 16), np.float32))


def test_adjacent_slice_positives(tiny_config):
    data = np.random.default_rng(0).random((4, 1, 16, 16)).astype(np.float32)
    cconfig = ContrastiveConfig(batch_size=4, local_patches_per_image=2,
                                positive_source="adjacent_slice")
    net = models.build_model(tiny_config, rng_seed=0)
    _, histories = contrastive.pretrain_contrastive(
        net, data, cconfig, AugmentationConfig(), ScheduleConfig(epochs=1),
        slice_subject=np.array([0, 0, 1, 1]))
    assert np.isfinite(histories["global"]["train_loss"][0])


@pytest.mark.slow
def test_pretrain_contrastive_loss_decreases(tiny_config):
    from sslseg import synth
    vols = synth.generate_phantom_dataset(synth.PhantomConfig(size=32, n_slices=1), 64)
    data = np.concatenate([v.slices for v in vols])
    first, last = [], []
    for seed in range(3):
        net = models.build_model(tiny_config, rng_seed=seed)
        _, histories = contrastive.pretrain_contrastive(
            net, data, ContrastiveConfig(seed=seed, local_patches_per_image=4),
            AugmentationConfig(), ScheduleConfig(epochs=50))
        first.append(histories["global"]["train_loss"][0])
        last.append(histories["global"]["train_loss"][-1])
    assert np.mean(last) < np.mean(first)


def _shift_separation(net, x, delta=0.15):
    """Mean cosine of each image to its brightness-shifted copy, minus the mean
    cosine to the shifted copies of the other images."""
    with torch.no_grad():
        z = models.forward_global_embedding(net, torch.from_numpy(x))
        zs = models.forward_global_embedding(net, torch.from_numpy(np.clip(x + delta, 0, 1)))
    sims = z @ zs.T
    n = len(x)
    positive = sims.diagonal().mean().item()
    negative = ((sims.sum() - sims.diagonal().sum()) / (n * (n - 1))).item()
    return positive, positive - negative


@pytest.mark.slow
def test_global_pretraining_pulls_brightness_shifted_copies_together(tiny_config,
                                                                      monkeypatch):
    from sslseg import synth
    phantom = synth.PhantomConfig(size=32, n_slices=1)
    data = np.concatenate([v.slices for v in synth.generate_phantom_dataset(phantom, 64)])
    held_out = np.concatenate([v.slices for v in synth.generate_phantom_dataset(
        phantom, 8, start=64, with_labels=False)])
    measured = {}
    original = contrastive._train_stage

    def measure_global_stage(net_, data_, stage, *args):
        if stage != "global":
            return original(net_, data_, stage, *args)
        measured["before"] = _shift_separation(net_, held_out)
        history = original(net_, data_, stage, *args)
        measured["after"] = _shift_separation(net_, held_out)
        return history

    monkeypatch.setattr(contrastive, "_train_stage", measure_global_stage)
    net = models.build_model(tiny_config, rng_seed=0)
    contrastive.pretrain_contrastive(net, data, ContrastiveConfig(local_patches_per_image=4),
                                     AugmentationConfig(), ScheduleConfig(epochs=30))
    # at initialization every pooled embedding is close to every other one, so
    # the shifted copy is measured against the other images' copies
    assert measured["after"][1] > measured["before"][1]
    assert measured["after"][0] > 0.5
