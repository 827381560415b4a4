"""
Contrastive pretraining: a temperature-scaled cosine-similarity loss over
positive pairs with in-batch negatives, trained first on whole-image embeddings
from the encoder and then on corresponding local patches of the decoder output.
"""
import logging
import time
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import trange

from . import core, models, utils
from .train import PlateauSchedule, ScheduleConfig
from .transforms import AugmentationConfig, random_view

contrastive_logger = logging.getLogger(__name__)
tqdm_out = utils.TqdmToLogger(contrastive_logger, level=logging.INFO)

POSITIVE_SOURCES = ("augment", "adjacent_slice")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    batch_size: int = 16
    local_patch_size: int = 3
    local_patches_per_image: int = 16
    seed: int = 0
    positive_source: str = "augment"
    freeze_encoder: bool = True
    local_crop: bool = False

    def validate(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature={self.temperature} must be > 0")
        if self.batch_size < 2:
            raise ValueError(f"batch_size={self.batch_size} must be >= 2 (a positive needs "
                             "at least one negative)")
        if self.local_patch_size < 1 or self.local_patch_size % 2 == 0:
            raise ValueError(f"local_patch_size={self.local_patch_size} must be odd")
        if self.local_patches_per_image < 1:
            raise ValueError(f"local_patches_per_image={self.local_patches_per_image} "
                             "must be >= 1")
        if self.positive_source not in POSITIVE_SOURCES:
            raise ValueError(f"positive_source={self.positive_source!r} not in "
                             f"{POSITIVE_SOURCES}")
        return self


class EmbeddingBatch(NamedTuple):
    """Anchors [A x D] and candidate positives [P x D].

    Anchor i's positive is positives[positive_index[i]]; every other row of
    positives acts as a negative for it.
    """
    anchors: torch.Tensor
    positives: torch.Tensor
    positive_index: Optional[torch.Tensor] = None

    def targets(self):
        if self.positive_index is None:
            return torch.arange(self.anchors.shape[0], device=self.anchors.device)
        return self.positive_index.to(self.anchors.device).long()

    def validate(self):
        core._check_ndim("anchors", self.anchors, 2)
        core._check_ndim("positives", self.positives, 2)
        if self.anchors.shape[1] != self.positives.shape[1]:
            raise ValueError(f"anchor dim {self.anchors.shape[1]} != positive dim "
                             f"{self.positives.shape[1]}")
        targets = self.targets()
        if targets.shape != (self.anchors.shape[0],):
            raise ValueError(f"positive_index shape {tuple(targets.shape)} != "
                             f"({self.anchors.shape[0]},)")
        if len(targets) and (targets.min() < 0 or targets.max() >= self.positives.shape[0]):
            raise ValueError("positive_index out of range")
        return self


def cosine_similarity(u, v):
    """
    Cosine of the angle between two nonzero vectors.

    Args:
        u, v (array-like): vectors of equal length, normalized internally.

    Returns:
        float: similarity in [-1, 1].
    """
    u = np.asarray(u, np.float64).ravel()
    v = np.asarray(v, np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1., 1.))


def _directional_loss(anchors, candidates, targets, temperature):
    logits = anchors @ candidates.T / temperature
    # cross_entropy subtracts the row max before exponentiating
    return F.cross_entropy(logits, targets)


def contrastive_loss(batch, temperature=0.1, symmetric=False):
    """
    Temperature-scaled contrastive loss with in-batch negatives.

    For anchor a with positive p and remaining candidates k:
        l = -log(exp(D(a, p) / t) / sum_k exp(D(a, k) / t))
    where D is the cosine similarity and the sum runs over the positive and
    every negative but never the anchor itself. The loss is averaged over
    anchors.

    Args:
        batch (EmbeddingBatch): embeddings, any positive scale.
        temperature (float): t > 0.
        symmetric (bool): also score positives against anchors and average the
            two directions; needs one positive per anchor in matching order.

    Returns:
        torch.Tensor: scalar loss.
    """
    batch.validate()
    if temperature <= 0:
        raise ValueError(f"temperature={temperature} must be > 0")
    if batch.positives.shape[0] < 2:
        error_message = ("contrastive loss needs at least 2 candidates per anchor, got "
                         f"{batch.positives.shape[0]}")
        contrastive_logger.critical(error_message)
        raise ValueError(error_message)
    anchors = core.l2_normalize(batch.anchors, dim=1)
    positives = core.l2_normalize(batch.positives, dim=1)
    targets = batch.targets()
    loss = _directional_loss(anchors, positives, targets, temperature)
    if symmetric:
        if anchors.shape[0] != positives.shape[0] or \
                not torch.equal(targets, torch.arange(len(targets), device=targets.device)):
            raise ValueError("symmetric contrastive loss needs paired anchors and positives")
        loss = 0.5 * (loss + _directional_loss(positives, anchors, targets, temperature))
    return loss


def make_positive_pair(x, aug, rng):
    """
    Two independently augmented views of one image.

    Args:
        x (np.ndarray): image [Ly x Lx] or [1 x Ly x Lx] in [0, 1].
        aug (AugmentationConfig): augmentation ranges.
        rng (np.random.Generator): random stream.

    Returns:
        tuple: (view_a, view_b, (geometry_a, geometry_b)), views shaped like x.
    """
    x = np.asarray(x, np.float32)
    img = x[0] if x.ndim == 3 else x
    view_a, geom_a = random_view(img, aug, rng)
    view_b, geom_b = random_view(img, aug, rng)
    if x.ndim == 3:
        view_a, view_b = view_a[np.newaxis], view_b[np.newaxis]
    return view_a, view_b, (geom_a, geom_b)


def _map_coordinate(c, start_a, extent_a, start_b, extent_b, L):
    """ pixel c of view a -> nearest pixel of view b through the source frame """
    src = start_a + (c + 0.5) * extent_a / L - 0.5
    pos = (src - start_b + 0.5) * L / extent_b - 0.5
    return int(np.floor(pos + 0.5))


def sample_local_patch_pairs(map_a, map_b, geometry, config, rng):
    """
    Average-pooled patch embeddings at corresponding locations of two views.

    Anchor locations are drawn without replacement from the non-overlapping
    p x p grid of each map in map_a. With crop geometry the matching window in
    map_b is found through the shared source frame; a location whose window
    falls outside map_b is replaced by another grid cell.

    Args:
        map_a, map_b (torch.Tensor): local embeddings [B x D x H x W].
        geometry (list or None): per image (ViewGeometry a, ViewGeometry b), or
            None when the views share pixel positions.
        config (ContrastiveConfig): patch size and patches per image.
        rng (np.random.Generator): random stream.

    Returns:
        EmbeddingBatch: B*K unit-norm anchors with positives in matching order;
        the other images' and locations' patches are the negatives.
    """
    if map_a.shape != map_b.shape:
        raise ValueError(f"map shapes differ: {tuple(map_a.shape)} vs {tuple(map_b.shape)}")
    core._check_ndim("local embedding map", map_a, 4)
    B, _, H, W = map_a.shape
    p, K = config.local_patch_size, config.local_patches_per_image
    ny, nx = H // p, W // p
    if K > ny * nx:
        error_message = (f"{K} patches requested but only {ny * nx} non-overlapping "
                         f"{p}x{p} locations exist in a {H}x{W} map")
        contrastive_logger.critical(error_message)
        raise ValueError(error_message)
    if geometry is not None and len(geometry) != B:
        raise ValueError(f"geometry has {len(geometry)} entries for {B} maps")

    bidx, ya, xa, yb, xb = [], [], [], [], []
    for b in range(B):
        accepted = 0
        for cell in rng.permutation(ny * nx):
            y0, x0 = (cell // nx) * p, (cell % nx) * p
            if geometry is None:
                y1, x1 = y0, x0
            else:
                ga, gb = geometry[b]
                cy = _map_coordinate(y0 + p // 2, ga.y0, ga.h, gb.y0, gb.h, H)
                cx = _map_coordinate(x0 + p // 2, ga.x0, ga.w, gb.x0, gb.w, W)
                y1, x1 = cy - p // 2, cx - p // 2
                if not (0 <= y1 <= H - p and 0 <= x1 <= W - p):
                    continue
            bidx.append(b)
            ya.append(y0)
            xa.append(x0)
            yb.append(y1)
            xb.append(x1)
            accepted += 1
            if accepted == K:
                break
        if accepted < K:
            error_message = f"only {accepted} of {K} patch locations of image {b} overlap both views"
            contrastive_logger.critical(error_message)
            raise ValueError(error_message)

    pooled_a = F.avg_pool2d(map_a, p, stride=1)
    pooled_b = F.avg_pool2d(map_b, p, stride=1)
    bidx = torch.as_tensor(bidx, device=map_a.device)
    anchors = pooled_a[bidx, :, torch.as_tensor(ya), torch.as_tensor(xa)]
    positives = pooled_b[bidx, :, torch.as_tensor(yb), torch.as_tensor(xb)]
    return EmbeddingBatch(core.l2_normalize(anchors, dim=1),
                          core.l2_normalize(positives, dim=1))


def _batches(rperm, batch_size):
    batches = [rperm[k:k + batch_size] for k in range(0, len(rperm), batch_size)]
    # a lone image has nothing to contrast against
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate(batches[-2:])
        batches = batches[:-1]
    return batches


def _adjacent_index(i, slice_subject, rng):
    candidates = [j for j in (i - 1, i + 1)
                  if 0 <= j < len(slice_subject) and slice_subject[j] == slice_subject[i]]
    if not candidates:
        return i
    return candidates[int(rng.integers(len(candidates)))]


def _views(data, inds, aug, cconfig, slice_subject, seed_keys):
    views_a, views_b, geometry = [], [], []
    for i in inds:
        rng = utils.rng_stream(*seed_keys, i)
        if cconfig.positive_source == "adjacent_slice" and slice_subject is not None:
            j = _adjacent_index(i, slice_subject, rng)
            va, ga = random_view(data[i, 0], aug, rng)
            vb, gb = random_view(data[j, 0], aug, rng)
            va, vb = va[np.newaxis], vb[np.newaxis]
        else:
            va, vb, (ga, gb) = make_positive_pair(data[i], aug, rng)
        views_a.append(va)
        views_b.append(vb)
        geometry.append((ga, gb))
    return np.stack(views_a), np.stack(views_b), geometry


def _train_stage(net, data, stage, cconfig, aug, schedule, slice_subject, parameters):
    nimg = len(data)
    optimizer = core.make_optimizer(parameters, schedule.initial_lr)
    plateau = PlateauSchedule(schedule, optimizer)
    use_geometry = stage == "local" and not aug.intensity_only
    history = {"epoch": [], "train_loss": [], "lr": []}
    t0 = time.time()
    stage_key = 0 if stage == "global" else 1
    for iepoch in trange(schedule.epochs, file=tqdm_out, mininterval=30):
        lr = plateau.lr
        rperm = utils.rng_stream(cconfig.seed, stage_key, iepoch).permutation(nimg)
        net.train()
        train_loss = 0.
        for ibatch, inds in enumerate(_batches(rperm, cconfig.batch_size)):
            va, vb, geometry = _views(data, inds, aug, cconfig, slice_subject,
                                      (cconfig.seed, stage_key, iepoch))
            Xa = core._to_device(va, device=net.device, dtype=net.dtype)
            Xb = core._to_device(vb, device=net.device, dtype=net.dtype)
            if stage == "global":
                batch = EmbeddingBatch(models.forward_global_embedding(net, Xa),
                                       models.forward_global_embedding(net, Xb))
            else:
                rng = utils.rng_stream(cconfig.seed, stage_key, iepoch, nimg + ibatch)
                batch = sample_local_patch_pairs(models.forward_local_embeddings(net, Xa),
                                                 models.forward_local_embeddings(net, Xb),
                                                 geometry if use_geometry else None,
                                                 cconfig, rng)
            loss = contrastive_loss(batch, cconfig.temperature, symmetric=True)
            utils.check_finite_loss(loss, contrastive_logger,
                                    f"at {stage} contrastive epoch {iepoch}")
            optimizer.zero_grad()
            core.backward(loss)
            core.adam_step(optimizer)
            train_loss += float(loss) * len(inds)
        train_loss /= nimg
        history["epoch"].append(iepoch)
        history["train_loss"].append(train_loss)
        history["lr"].append(lr)
        plateau.step(train_loss)
        if iepoch == 5 or iepoch % 10 == 0:
            contrastive_logger.info(f"{stage} {iepoch}, train_loss={train_loss:.4f}, "
                                    f"LR={lr:.6f}, time {time.time() - t0:.2f}s")
    return history


def pretrain_contrastive(net, data, cconfig=ContrastiveConfig(), aconfig=AugmentationConfig(),
                         schedule=ScheduleConfig(), slice_subject=None):
    """
    Two-stage contrastive pretraining.

    Stage 1 trains the encoder and bottleneck with a global head on whole-image
    embeddings. Stage 2 attaches a local head and trains the decoder on
    corresponding patch embeddings; the encoder and bottleneck stay fixed when
    cconfig.freeze_encoder is set. Stage 2 uses intensity-only views unless
    cconfig.local_crop is set.

    Args:
        net (UNet): model, any current head is replaced.
        data (np.ndarray): unlabeled slices [N x 1 x Ly x Lx] in [0, 1].
        cconfig (ContrastiveConfig): loss and sampling parameters.
        aconfig (AugmentationConfig): view augmentation ranges.
        schedule (ScheduleConfig): epochs (per stage), learning rate, plateau rule.
        slice_subject (np.ndarray, optional): subject index of every slice, used
            by positive_source="adjacent_slice" to pair neighbouring slices.

    Returns:
        tuple: (net with the local head attached, {"global": history, "local": history}).
    """
    cconfig.validate()
    aconfig.validate()
    schedule.validate()
    if data is None or len(data) < 2:
        error_message = "pretrain_contrastive needs at least 2 unlabeled images"
        contrastive_logger.critical(error_message)
        raise ValueError(error_message)
    if slice_subject is not None and len(slice_subject) != len(data):
        raise ValueError(f"slice_subject has {len(slice_subject)} entries for {len(data)} slices")
    contrastive_logger.info(f">>> contrastive pretraining n_epochs={schedule.epochs} per stage, "
                            f"n_images={len(data)}, temperature={cconfig.temperature}, "
                            f"positives={cconfig.positive_source}")

    models.swap_heads(net, "global", seed=cconfig.seed)
    params = list(net.encoder_parameters()) + list(net.head.parameters())
    history_global = _train_stage(net, data, "global", cconfig, aconfig, schedule,
                                  slice_subject, params)

    models.swap_heads(net, "local", seed=cconfig.seed + 1)
    local_aug = replace(aconfig, intensity_only=not cconfig.local_crop)
    params = list(net.decoder_parameters()) + list(net.head.parameters())
    if cconfig.freeze_encoder:
        for p in net.encoder_parameters():
            p.requires_grad_(False)
    else:
        params = list(net.encoder_parameters()) + params
    try:
        history_local = _train_stage(net, data, "local", cconfig, local_aug, schedule,
                                     slice_subject, params)
    finally:
        for p in net.encoder_parameters():
            p.requires_grad_(True)
    return net, {"global": history_global, "local": history_local}
