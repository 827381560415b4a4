"""
Masked-pixel regression pretraining: a random subset of pixels is replaced by
Gaussian noise and the model learns to restore them, scored only where the
image was corrupted.
"""
import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
from tqdm import trange

from . import core, models, utils
from .train import PlateauSchedule, ScheduleConfig

regression_logger = logging.getLogger(__name__)
tqdm_out = utils.TqdmToLogger(regression_logger, level=logging.INFO)


@dataclass
class CorruptionConfig:
    fraction: float = 0.10
    sigma: float = 0.01
    seed: int = 0

    def validate(self):
        if not 0 <= self.fraction <= 1:
            raise ValueError(f"fraction={self.fraction} must lie in [0, 1]")
        if self.sigma <= 0:
            raise ValueError(f"sigma={self.sigma} must be > 0")
        return self

    def n_masked(self, Ly, Lx):
        """ masked pixels per image, round-half-up of fraction * Ly * Lx """
        return int(np.floor(self.fraction * Ly * Lx + 0.5))


def corrupt_image(x, config, rng):
    """
    Replace a fixed number of random pixels per image with N(0, sigma) noise.

    x_hat = (1 - M) * x + noise * M; unmasked pixels are copied bitwise and the
    noise is not clipped.

    Args:
        x (np.ndarray): images [B x 1 x Ly x Lx] (or [1 x Ly x Lx]) in [0, 1].
        config (CorruptionConfig): masked fraction and noise level.
        rng (np.random.Generator): random stream, consumed image by image.

    Returns:
        tuple: (x_hat float32 same shape as x, mask float32 same shape with
        exactly config.n_masked(Ly, Lx) ones per image).
    """
    x = np.asarray(x, np.float32)
    squeeze = x.ndim == 3
    xb = x[np.newaxis] if squeeze else x
    core._check_ndim("corrupt_image input", xb, 4)
    B, C, Ly, Lx = xb.shape
    n = config.n_masked(Ly, Lx)
    x_hat = xb.copy()
    mask = np.zeros(xb.shape, np.float32)
    for b in range(B):
        inds = rng.permutation(Ly * Lx)[:n]
        iy, ix = np.unravel_index(inds, (Ly, Lx))
        mask[b, :, iy, ix] = 1.
        x_hat[b, :, iy, ix] = rng.normal(0., config.sigma, (n, C)).astype(np.float32)
    if squeeze:
        return x_hat[0], mask[0]
    return x_hat, mask


def masked_l1_loss(recon, ref, mask):
    """
    Mean absolute error over the masked pixels only.

    Args:
        recon (torch.Tensor): reconstruction.
        ref (torch.Tensor): clean reference, same shape.
        mask (torch.Tensor): 0/1 mask, same shape.

    Returns:
        torch.Tensor: scalar, sum |M * (recon - ref)| / sum(M). An empty mask
        gives 0 (still attached to recon) with a warning.
    """
    if recon.shape != ref.shape or recon.shape != mask.shape:
        raise ValueError(f"masked_l1_loss shapes differ: recon {tuple(recon.shape)}, "
                         f"ref {tuple(ref.shape)}, mask {tuple(mask.shape)}")
    mask = mask.to(recon.dtype)
    n = mask.sum()
    if float(n) == 0:
        regression_logger.warning("empty corruption mask, masked L1 loss is 0")
        return recon.sum() * 0.
    return (mask * (recon - ref.to(recon.dtype))).abs().sum() / n


def pretrain_regression(net, data, config=CorruptionConfig(), schedule=ScheduleConfig()):
    """
    Pretrain the model to restore corrupted pixels.

    Masks are redrawn for every image and epoch from the stream
    (config.seed, image index, epoch). The learning rate follows the plateau
    rule on the epoch training loss.

    Args:
        net (UNet): model with a regression head.
        data (np.ndarray): unlabeled slices [N x 1 x Ly x Lx] in [0, 1].
        config (CorruptionConfig): corruption parameters and seed.
        schedule (ScheduleConfig): epochs, learning rate, plateau rule, batch size.

    Returns:
        tuple: (net, history dict with lists "epoch", "train_loss", "lr" and
        int "n_steps").
    """
    if data is None or len(data) == 0:
        error_message = "pretrain_regression needs a nonempty unlabeled dataset"
        regression_logger.critical(error_message)
        raise ValueError(error_message)
    if net.head_mode != "regression":
        raise ValueError(f"pretrain_regression needs a regression head, got {net.head_mode}")
    config.validate()
    schedule.validate()

    nimg = len(data)
    batch_size = schedule.batch_size
    optimizer = core.make_optimizer(net.parameters(), schedule.initial_lr)
    plateau = PlateauSchedule(schedule, optimizer)
    regression_logger.info(f">>> regression pretraining n_epochs={schedule.epochs}, "
                           f"n_images={nimg}, fraction={config.fraction}, "
                           f"sigma={config.sigma}")

    history = {"epoch": [], "train_loss": [], "lr": [], "n_steps": 0}
    t0 = time.time()
    for iepoch in trange(schedule.epochs, file=tqdm_out, mininterval=30):
        lr = plateau.lr
        rperm = utils.rng_stream(config.seed, iepoch).permutation(nimg)
        net.train()
        train_loss = 0.
        for k in range(0, nimg, batch_size):
            inds = rperm[k:k + batch_size]
            imgs = np.asarray(data[inds], np.float32)
            corrupted = [corrupt_image(imgs[j], config, utils.rng_stream(config.seed, i, iepoch))
                         for j, i in enumerate(inds)]
            x_hat = np.stack([c[0] for c in corrupted])
            mask = np.stack([c[1] for c in corrupted])
            X = core._to_device(x_hat, device=net.device, dtype=net.dtype)
            ref = core._to_device(imgs, device=net.device, dtype=net.dtype)
            M = core._to_device(mask, device=net.device, dtype=net.dtype)
            loss = masked_l1_loss(models.forward_reconstruction(net, X), ref, M)
            utils.check_finite_loss(loss, regression_logger, f"at regression epoch {iepoch}")
            optimizer.zero_grad()
            if loss.requires_grad:
                core.backward(loss)
            core.adam_step(optimizer)
            history["n_steps"] += 1
            train_loss += float(loss) * len(inds)
        train_loss /= nimg
        history["epoch"].append(iepoch)
        history["train_loss"].append(train_loss)
        history["lr"].append(lr)
        plateau.step(train_loss)
        if iepoch == 5 or iepoch % 10 == 0:
            regression_logger.info(f"{iepoch}, train_loss={train_loss:.4f}, LR={lr:.6f}, "
                                   f"time {time.time() - t0:.2f}s")
    return net, history
