"""
Supervised finetuning with a multi-label soft Dice loss and a plateau
learning-rate schedule, plus volume-level evaluation.
"""
import copy
import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim.lr_scheduler import ReduceLROnPlateau
from tqdm import trange

from . import core, metrics, models, utils
from .transforms import FinetuneAugmentConfig, augment_finetune

train_logger = logging.getLogger(__name__)
tqdm_out = utils.TqdmToLogger(train_logger, level=logging.INFO)

DICE_EPS = 1e-5
MIN_LR = 1e-6


@dataclass
class ScheduleConfig:
    epochs: int = 500
    initial_lr: float = 1e-3
    plateau_patience: int = 20
    plateau_min_delta: float = 1e-4
    halving_factor: float = 0.5
    batch_size: int = 4

    def validate(self):
        if self.epochs < 0:
            raise ValueError(f"epochs={self.epochs} must be >= 0")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr={self.initial_lr} must be > 0")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience={self.plateau_patience} must be >= 1")
        if not 0 < self.halving_factor < 1:
            raise ValueError(f"halving_factor={self.halving_factor} must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError(f"batch_size={self.batch_size} must be >= 1")
        return self


class PlateauSchedule:
    """Halve the learning rate after `patience` epochs without improvement.

    An epoch improves when its monitored loss is below the best so far by more
    than min_delta. After a reduction the patience counter restarts; the
    learning rate never drops below 1e-6 and never increases.
    """

    def __init__(self, config, optimizer=None):
        self.config = config.validate()
        if optimizer is None:
            optimizer = torch.optim.SGD([torch.zeros(1, requires_grad=True)],
                                        lr=config.initial_lr)
        else:
            core.set_learning_rate(optimizer, config.initial_lr)
        self.optimizer = optimizer
        # torch reduces once num_bad_epochs > patience
        self.scheduler = ReduceLROnPlateau(optimizer, mode="min",
                                           factor=config.halving_factor,
                                           patience=config.plateau_patience - 1,
                                           threshold=config.plateau_min_delta,
                                           threshold_mode="abs", cooldown=0,
                                           min_lr=MIN_LR, eps=0.0)

    @property
    def lr(self):
        return self.optimizer.param_groups[0]["lr"]

    def step(self, validation_loss):
        self.scheduler.step(float(validation_loss))
        return self.lr


def lr_schedule_step(schedule, validation_loss):
    """ advance the plateau schedule by one epoch and return the new learning rate """
    return schedule.step(validation_loss)


def dice_loss(scores, labels):
    """
    Multi-label soft Dice loss over the foreground classes.

    loss = 1 - mean_c (2 Σ p_c g_c + ε) / (Σ p_c + Σ g_c + ε), c = 1..C-1, with
    p the softmax over classes, g the one-hot labels and sums over batch and
    pixels.

    Args:
        scores (torch.Tensor): class scores [B x C x H x W].
        labels (torch.Tensor): integer labels [B x H x W].

    Returns:
        torch.Tensor: scalar loss.
    """
    C = scores.shape[1]
    labels = labels.long()
    if labels.shape != (scores.shape[0], *scores.shape[2:]):
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match scores "
                         f"{tuple(scores.shape)}")
    if C < 2:
        raise ValueError("dice_loss needs at least one foreground class (C >= 2)")
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label values must lie in [0, {C - 1}], got "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    p = F.softmax(scores, dim=1)
    g = F.one_hot(labels, C).permute(0, 3, 1, 2).to(p.dtype)
    dims = (0, 2, 3)
    intersection = (p * g).sum(dims)
    denominator = p.sum(dims) + g.sum(dims)
    dice = (2. * intersection + DICE_EPS) / (denominator + DICE_EPS)
    return 1. - dice[1:].mean()


def _eval_loss(net, data, labels, batch_size):
    """ mean Dice loss over a labeled set without augmentation """
    loss_sum, n = 0., 0
    net.eval()
    with torch.no_grad():
        for k in range(0, len(data), batch_size):
            X = core._to_device(data[k:k + batch_size], device=net.device, dtype=net.dtype)
            lbl = torch.from_numpy(np.asarray(labels[k:k + batch_size], np.int64)).to(net.device)
            loss = dice_loss(models.forward_segmentation(net, X), lbl)
            loss_sum += float(loss) * len(X)
            n += len(X)
    return loss_sum / n


def finetune(net, train_data, train_labels, val_data=None, val_labels=None,
             schedule=ScheduleConfig(), seed=0, augment=FinetuneAugmentConfig()):
    """
    Train a segmentation-headed model with the Dice loss.

    Args:
        net (UNet): model whose head is already swapped to segmentation.
        train_data (np.ndarray): training slices [N x 1 x H x W] in [0, 1].
        train_labels (np.ndarray): integer labels [N x H x W].
        val_data (np.ndarray, optional): validation slices; the training loss
            drives the schedule when no validation set is given.
        val_labels (np.ndarray, optional): validation labels.
        schedule (ScheduleConfig): epochs, learning rate, plateau rule, batch size.
        seed (int): seed of shuffling and augmentation streams.
        augment (FinetuneAugmentConfig or None): per-sample augmentation, None for none.

    Returns:
        tuple: (net with the best-validation weights loaded, history dict with
        lists "epoch", "train_loss", "val_loss", "lr" and int "best_epoch").
    """
    if train_data is None or len(train_data) == 0:
        error_message = "finetune needs a nonempty training set"
        train_logger.critical(error_message)
        raise ValueError(error_message)
    if net.head_mode != "segmentation":
        raise ValueError(f"finetune needs a segmentation head, got {net.head_mode}")
    schedule.validate()
    has_val = val_data is not None and len(val_data) > 0
    if not has_val:
        train_logger.warning("no validation set, using training loss for schedule and "
                             "checkpoint selection")

    nimg = len(train_data)
    batch_size = schedule.batch_size
    optimizer = core.make_optimizer(net.parameters(), schedule.initial_lr)
    plateau = PlateauSchedule(schedule, optimizer)

    train_logger.info(f">>> finetune n_epochs={schedule.epochs}, n_train={nimg}, "
                      f"n_val={len(val_data) if has_val else 0}, lr={schedule.initial_lr}")
    history = {"epoch": [], "train_loss": [], "val_loss": [], "lr": [], "best_epoch": -1}
    best_loss, best_state = np.inf, copy.deepcopy(net.state_dict())
    t0 = time.time()
    for iepoch in trange(schedule.epochs, file=tqdm_out, mininterval=30):
        lr = plateau.lr
        rperm = utils.rng_stream(seed, iepoch).permutation(nimg)
        net.train()
        train_loss = 0.
        for k in range(0, nimg, batch_size):
            inds = rperm[k:k + batch_size]
            imgs, lbls = train_data[inds], train_labels[inds]
            if augment is not None:
                pairs = [augment_finetune(imgs[j], lbls[j], utils.rng_stream(seed, iepoch, i),
                                          augment) for j, i in enumerate(inds)]
                imgs = np.stack([p[0] for p in pairs])
                lbls = np.stack([p[1] for p in pairs])
            X = core._to_device(imgs, device=net.device, dtype=net.dtype)
            lbl = torch.from_numpy(np.asarray(lbls, np.int64)).to(net.device)
            loss = dice_loss(models.forward_segmentation(net, X), lbl)
            utils.check_finite_loss(loss, train_logger, f"at finetune epoch {iepoch}")
            optimizer.zero_grad()
            core.backward(loss)
            core.adam_step(optimizer)
            train_loss += float(loss) * len(inds)
        train_loss /= nimg

        val_loss = _eval_loss(net, val_data, val_labels, batch_size) if has_val else train_loss
        history["epoch"].append(iepoch)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        history["lr"].append(lr)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(net.state_dict())
            history["best_epoch"] = iepoch
        plateau.step(val_loss)
        if iepoch == 5 or iepoch % 10 == 0:
            train_logger.info(f"{iepoch}, train_loss={train_loss:.4f}, val_loss={val_loss:.4f}, "
                              f"LR={lr:.6f}, time {time.time() - t0:.2f}s")

    net.load_state_dict(best_state)
    return net, history


def evaluate_volume(net, volume_slices, volume_labels, classes=None, batch_size=8,
                    return_labels=False):
    """
    Volume-level Dice of a segmentation model on one subject.

    Args:
        net (UNet): model with a segmentation head.
        volume_slices (np.ndarray): slices [S x 1 x H x W] of one subject.
        volume_labels (np.ndarray): ground-truth labels [S x H x W].
        classes (list of int, optional): classes to score, all foreground classes by default.
        batch_size (int): slices per forward pass.
        return_labels (bool): also return the predicted labels.

    Returns:
        dict: class -> Dice for the whole volume, or (dict, predicted labels
        [S x H x W]) with return_labels.
    """
    if classes is None:
        classes = range(1, net.config.num_classes)
    preds = models.predict_labels(net, volume_slices, batch_size=batch_size)
    dice = metrics.volume_dice(preds, volume_labels, classes)
    return (dice, preds) if return_labels else dice
