"""
Model construction and head-specific forward passes.

A model is a UNet backbone carrying at most one head. The pretext heads
(regression, global, local) are discarded before finetuning by swapping in a
segmentation head; the backbone weights are never touched by a swap.
"""
import logging

import numpy as np
import torch

from . import core
from .unet_torch import HEAD_MODES, UNet, UNetConfig

models_logger = logging.getLogger(__name__)


def build_model(config, rng_seed=0, device=None):
    """Build a deterministically initialized backbone without a head.

    Args:
        config (UNetConfig): architecture hyperparameters.
        rng_seed (int): seed of the parameter initialization.
        device (torch.device, optional): defaults to CPU.

    Returns:
        UNet
    """
    try:
        config.validate()
    except ValueError as err:
        models_logger.critical(str(err))
        raise
    net = UNet(config, seed=rng_seed)
    if device is not None:
        net.to(device)
    models_logger.info(f"built UNet depth={config.depth} base={config.base_channels} "
                       f"classes={config.num_classes} seed={rng_seed}")
    return net


def swap_heads(net, mode, seed=0):
    """Attach a freshly initialized head for mode, detaching any other head.

    Args:
        net (UNet): model to modify in place.
        mode (str): one of "regression", "global", "local", "segmentation".
        seed (int): seed of the head initialization.

    Returns:
        UNet: the same model.
    """
    if mode not in HEAD_MODES:
        error_message = f"unknown head mode {mode!r}, expected one of {HEAD_MODES}"
        models_logger.critical(error_message)
        raise ValueError(error_message)
    previous = net.head_mode
    net.attach_head(mode, seed=seed)
    models_logger.info(f"swapped head {previous} -> {mode}")
    return net


def _require_head(net, mode):
    if net.head_mode != mode:
        raise ValueError(f"{mode} head not attached (current head: {net.head_mode})")


def forward_segmentation(net, x):
    """ per-pixel class scores [B x num_classes x H x W] (pre-softmax) """
    _require_head(net, "segmentation")
    return net(x).head_output


def forward_reconstruction(net, x_hat):
    """ image estimate [B x 1 x H x W] from a corrupted input """
    _require_head(net, "regression")
    return net(x_hat).head_output


def forward_global_embedding(net, x):
    """ unit-norm rows [B x global_embed_dim] from the bottleneck """
    _require_head(net, "global")
    return net(x, decode=False).head_output


def forward_local_embeddings(net, x):
    """ per-pixel unit-norm embeddings [B x local_embed_dim x H x W] """
    _require_head(net, "local")
    return net(x).head_output


def predict_labels(net, x, batch_size=8):
    """Run the segmentation head on a stack of images and argmax per pixel.

    Ties in the class scores go to the lowest class index.

    Args:
        net (UNet): model with a segmentation head.
        x (numpy.ndarray): images [S x 1 x H x W].
        batch_size (int): images per forward pass.

    Returns:
        numpy.ndarray: int64 labels [S x H x W].
    """
    _require_head(net, "segmentation")
    net.eval()
    preds = np.zeros((x.shape[0], *x.shape[-2:]), np.int64)
    with torch.no_grad():
        for k in range(0, x.shape[0], batch_size):
            X = core._to_device(x[k:k + batch_size], device=net.device, dtype=net.dtype)
            scores = net(X).head_output
            preds[k:k + batch_size] = core._from_device(scores.argmax(dim=1))
    return preds


__all__ = ["UNetConfig", "UNet", "HEAD_MODES", "build_model", "swap_heads",
           "forward_segmentation", "forward_reconstruction", "forward_global_embedding",
           "forward_local_embeddings", "predict_labels"]
