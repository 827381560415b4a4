import logging

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from sslseg import models, train
from sslseg.train import PlateauSchedule, ScheduleConfig, dice_loss, lr_schedule_step


def test_dice_loss_perfect_and_wrong():
    labels = torch.zeros(1, 8, 8, dtype=torch.long)
    labels[0, 2:6, 2:6] = 1
    onehot = F.one_hot(labels, 2).permute(0, 3, 1, 2).double()
    assert dice_loss(100. * onehot, labels).item() < 1e-4
    assert dice_loss(100. * (1 - onehot), labels).item() > 1 - 1e-4


def test_dice_loss_multiclass_mean():
    labels = torch.tensor([[[0, 1], [2, 2]]])
    scores = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    scores[0, 0] = 100.
    # nothing predicted for either foreground class
    assert dice_loss(scores, labels).item() == pytest.approx(1., abs=1e-4)
    scores[0, 2, 1, :] = 200.
    assert dice_loss(scores, labels).item() == pytest.approx(0.5, abs=1e-4)


def test_dice_loss_errors():
    scores = torch.zeros(1, 2, 4, 4)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        dice_loss(scores, torch.full((1, 4, 4), 2))
    with pytest.raises(ValueError, match="does not match"):
        dice_loss(scores, torch.zeros(1, 4, 5))
    with pytest.raises(ValueError, match="foreground"):
        dice_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 4, 4))


@pytest.mark.parametrize("seed", range(10))
def test_dice_loss_gradient(seed, float64, grad_error):
    g = torch.Generator().manual_seed(seed)
    scores = torch.randn(1, 2, 8, 8, generator=g)
    labels = torch.randint(0, 2, (1, 8, 8), generator=g)
    assert grad_error(lambda s: dice_loss(s, labels), [scores]) < 1e-4


def test_full_model_dice_gradient(float64, grad_error):
    from sslseg.unet_torch import UNetConfig
    config = UNetConfig(depth=1, base_channels=2, num_classes=2, global_embed_dim=4,
                        local_embed_dim=4, global_hidden_dim=4)
    net = models.swap_heads(models.build_model(config, rng_seed=0), "segmentation", seed=0)
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 1, 16, 16, generator=g)
    labels = torch.randint(0, 2, (1, 16, 16), generator=g)
    loss = lambda image: dice_loss(models.forward_segmentation(net, image), labels)
    assert grad_error(loss, [x]) < 1e-3


def test_full_model_dice_gradient_wrt_parameters(float64, grad_error):
    from sslseg.unet_torch import UNetConfig
    config = UNetConfig(depth=1, base_channels=2, num_classes=2, global_embed_dim=4,
                        local_embed_dim=4, global_hidden_dim=4)
    net = models.swap_heads(models.build_model(config, rng_seed=1), "segmentation", seed=1)
    g = torch.Generator().manual_seed(1)
    x = torch.rand(1, 1, 16, 16, generator=g)
    labels = torch.randint(0, 2, (1, 16, 16), generator=g)
    names, params = zip(*net.named_parameters())

    def loss(*values):
        out = torch.func.functional_call(net, dict(zip(names, values)), (x,))
        return dice_loss(out.head_output, labels)

    assert grad_error(loss, [p.detach() for p in params]) < 1e-3


def _run_schedule(losses, **kwargs):
    schedule = PlateauSchedule(ScheduleConfig(**kwargs))
    return [lr_schedule_step(schedule, loss) for loss in losses]


def test_schedule_decreasing_losses_keep_lr():
    lrs = _run_schedule(np.linspace(1., 0.5, 60), initial_lr=1e-3)
    assert all(lr == 1e-3 for lr in lrs)


def test_schedule_halves_after_patience():
    patience = 20
    lrs = _run_schedule([0.7] * (2 * patience + 1), initial_lr=1e-3,
                        plateau_patience=patience)
    assert lrs[patience - 1] == pytest.approx(1e-3)
    assert lrs[patience] == pytest.approx(5e-4)
    assert lrs[2 * patience - 1] == pytest.approx(5e-4)
    assert lrs[2 * patience] == pytest.approx(2.5e-4)


def test_schedule_min_delta():
    # improvements smaller than min_delta count as a plateau
    losses = 1. - 3e-5 * np.arange(4)
    lrs = _run_schedule(losses, initial_lr=1e-3, plateau_patience=3, plateau_min_delta=1e-4)
    assert lrs[-1] == pytest.approx(5e-4)
    lrs = _run_schedule(1. - 2e-4 * np.arange(4), initial_lr=1e-3, plateau_patience=3)
    assert lrs[-1] == pytest.approx(1e-3)


def test_schedule_is_monotone_with_floor():
    rng = np.random.default_rng(0)
    lrs = _run_schedule(rng.random(200), initial_lr=1e-3, plateau_patience=2)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    lrs = _run_schedule([1.] * 10, initial_lr=3e-6, plateau_patience=1)
    assert lrs[1] == pytest.approx(1.5e-6)
    assert lrs[-1] == pytest.approx(train.MIN_LR)


def test_schedule_config_validation():
    with pytest.raises(ValueError, match="plateau_patience"):
        ScheduleConfig(plateau_patience=0).validate()
    with pytest.raises(ValueError, match="halving_factor"):
        ScheduleConfig(halving_factor=1.).validate()


def _labeled(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    data = rng.random((n, 1, size, size)).astype(np.float32)
    labels = (data[:, 0] > 0.5).astype(np.uint8)
    return data, labels


def test_finetune_history_and_best_checkpoint(tiny_net):
    models.swap_heads(tiny_net, "segmentation", seed=0)
    data, labels = _labeled(4)
    val_data, val_labels = _labeled(2, seed=1)
    schedule = ScheduleConfig(epochs=4, batch_size=2, initial_lr=1e-2)
    net, history = train.finetune(tiny_net, data, labels, val_data, val_labels,
                                  schedule=schedule, seed=0)
    for key in ("epoch", "train_loss", "val_loss", "lr"):
        assert len(history[key]) == 4
    assert history["best_epoch"] == int(np.argmin(history["val_loss"]))
    best = train._eval_loss(net, val_data, val_labels, 2)
    assert best == pytest.approx(min(history["val_loss"]), abs=1e-6)


def test_finetune_is_deterministic(tiny_config):
    data, labels = _labeled(3)
    runs = []
    for _ in range(2):
        net = models.swap_heads(models.build_model(tiny_config, rng_seed=0), "segmentation")
        net, history = train.finetune(net, data, labels, schedule=ScheduleConfig(epochs=2),
                                      seed=5)
        runs.append((history["train_loss"], net.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].items():
        assert torch.equal(v, runs[1][1][k]), k


def test_finetune_without_validation_warns(tiny_net, caplog):
    models.swap_heads(tiny_net, "segmentation")
    data, labels = _labeled(2)
    with caplog.at_level(logging.WARNING):
        _, history = train.finetune(tiny_net, data, labels, schedule=ScheduleConfig(epochs=2),
                                    augment=None)
    assert "no validation set" in caplog.text
    assert history["val_loss"] == history["train_loss"]


def test_finetune_errors(tiny_net):
    data, labels = _labeled(2)
    with pytest.raises(ValueError, match="segmentation head"):
        train.finetune(tiny_net, data, labels)
    models.swap_heads(tiny_net, "segmentation")
    with pytest.raises(ValueError, match="nonempty"):
        train.finetune(tiny_net, data[:0], labels[:0])


def test_evaluate_volume_counts_across_slices(tiny_net):
    models.swap_heads(tiny_net, "segmentation")
    with torch.no_grad():
        tiny_net.head.weight.zero_()
        tiny_net.head.bias.copy_(torch.tensor([0., 1.]))
    slices = np.zeros((2, 1, 16, 16), np.float32)
    labels = np.zeros((2, 16, 16), np.uint8)
    labels[0] = 1
    # everything predicted as class 1
    dice = train.evaluate_volume(tiny_net, slices, labels)
    assert list(dice) == [1]
    assert dice[1] == pytest.approx(2 * 256 / (512 + 256))
    assert train.evaluate_volume(tiny_net, slices[[1, 0]], labels[[1, 0]]) == dice
