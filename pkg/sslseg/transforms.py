"""
Intensity normalization and the augmentations used for pretraining views and
for finetuning samples.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

transforms_logger = logging.getLogger(__name__)


def normalize_unit(raw):
    """Min-max normalize a whole volume to [0, 1].

    Args:
        raw (numpy.ndarray): raw intensities of one subject, any shape.

    Returns:
        numpy.ndarray: float32 array of the same shape. A constant volume maps
        to zeros (with a warning).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        error_message = "normalize_unit received NaN or Inf values"
        transforms_logger.critical(error_message)
        raise ValueError(error_message)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        transforms_logger.warning("constant volume, normalizing to all zeros")
        return np.zeros(raw.shape, np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def _ordered(name, pair):
    lo, hi = pair
    if lo > hi:
        raise ValueError(f"{name} range {pair} is not ordered")
    return float(lo), float(hi)


@dataclass
class AugmentationConfig:
    """ view augmentation for contrastive pretraining (crop fraction is of area) """
    crop_scale: Tuple[float, float] = (0.7, 1.0)
    brightness_delta: Tuple[float, float] = (-0.2, 0.2)
    contrast_factor: Tuple[float, float] = (0.8, 1.25)
    intensity_only: bool = False

    def validate(self):
        lo, hi = _ordered("crop_scale", self.crop_scale)
        if lo <= 0 or hi > 1:
            raise ValueError(f"crop_scale {self.crop_scale} must lie in (0, 1]")
        _ordered("brightness_delta", self.brightness_delta)
        lo, _ = _ordered("contrast_factor", self.contrast_factor)
        if lo <= 0:
            raise ValueError(f"contrast_factor {self.contrast_factor} must be positive")
        return self


class ViewGeometry(NamedTuple):
    """ crop window (in source pixels) that a view was resized from """
    y0: int
    x0: int
    h: int
    w: int


def random_view(x, aug, rng):
    """Draw one augmented view of a single image.

    The crop keeps the aspect ratio and is resized back to the input size;
    contrast is scaled about the view mean, brightness is added, and the
    result is clamped to [0, 1].

    Args:
        x (numpy.ndarray): image [Ly x Lx] in [0, 1].
        aug (AugmentationConfig): augmentation ranges.
        rng (numpy.random.Generator): random stream.

    Returns:
        tuple: (view [Ly x Lx] float32, ViewGeometry).
    """
    Ly, Lx = x.shape
    view = np.asarray(x, np.float32)
    geometry = ViewGeometry(0, 0, Ly, Lx)
    scale = rng.uniform(*aug.crop_scale)
    if not aug.intensity_only:
        h = min(Ly, max(1, int(round(Ly * np.sqrt(scale)))))
        w = min(Lx, max(1, int(round(Lx * np.sqrt(scale)))))
        y0 = int(rng.integers(0, Ly - h + 1))
        x0 = int(rng.integers(0, Lx - w + 1))
        if (h, w) != (Ly, Lx):
            view = cv2.resize(view[y0:y0 + h, x0:x0 + w], (Lx, Ly),
                              interpolation=cv2.INTER_LINEAR)
            geometry = ViewGeometry(y0, x0, h, w)
    delta = rng.uniform(*aug.brightness_delta)
    factor = rng.uniform(*aug.contrast_factor)
    if factor != 1.0:
        mean = view.mean()
        view = (view - mean) * np.float32(factor) + mean
    if delta != 0.0:
        view = view + np.float32(delta)
    return np.clip(view, 0.0, 1.0).astype(np.float32), geometry


@dataclass
class FinetuneAugmentConfig:
    """ translation (fraction of extent), crop area scale, elastic smoothing/amplitude (px) """
    translate: float = 0.1
    crop_scale: Tuple[float, float] = (0.8, 1.0)
    elastic_sigma: float = 8.0
    elastic_alpha: float = 10.0

    def validate(self):
        if not 0 <= self.translate < 1:
            raise ValueError(f"translate={self.translate} must lie in [0, 1)")
        lo, hi = _ordered("crop_scale", self.crop_scale)
        if lo <= 0 or hi > 1:
            raise ValueError(f"crop_scale {self.crop_scale} must lie in (0, 1]")
        if self.elastic_sigma <= 0 or self.elastic_alpha < 0:
            raise ValueError("elastic_sigma must be > 0 and elastic_alpha >= 0")
        return self


def _displacement(shape, sigma, alpha, rng):
    field = gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant", cval=0)
    peak = np.abs(field).max()
    if peak > 0:
        field = field / peak
    return field * alpha


def augment_finetune(image, labels, rng, config=FinetuneAugmentConfig()):
    """Random translation, crop-and-resize and elastic deformation of a labeled slice.

    All three are folded into one sampling grid. The image is interpolated
    bilinearly and re-clamped to [0, 1]; labels use nearest-neighbour sampling
    so no new label values appear.

    Args:
        image (numpy.ndarray): [1 x Ly x Lx] or [Ly x Lx] in [0, 1].
        labels (numpy.ndarray): integer labels [Ly x Lx].
        rng (numpy.random.Generator): random stream.
        config (FinetuneAugmentConfig): augmentation parameters.

    Returns:
        tuple: (image, labels) with the input shapes and dtypes.
    """
    img = np.asarray(image)
    squeeze = img.ndim == 2
    img2d = img if squeeze else img[0]
    Ly, Lx = img2d.shape
    ty = rng.uniform(-config.translate, config.translate) * Ly
    tx = rng.uniform(-config.translate, config.translate) * Lx
    scale = np.sqrt(rng.uniform(*config.crop_scale))
    h, w = Ly * scale, Lx * scale
    y0 = rng.uniform(0, Ly - h)
    x0 = rng.uniform(0, Lx - w)
    dy = _displacement((Ly, Lx), config.elastic_sigma, config.elastic_alpha, rng)
    dx = _displacement((Ly, Lx), config.elastic_sigma, config.elastic_alpha, rng)

    yy, xx = np.meshgrid(np.arange(Ly, dtype=np.float64), np.arange(Lx, dtype=np.float64),
                         indexing="ij")
    coords = np.stack((y0 + yy * (h / Ly) - ty + dy, x0 + xx * (w / Lx) - tx + dx))

    img_out = map_coordinates(img2d, coords, order=1, mode="nearest")
    img_out = np.clip(img_out, 0.0, 1.0).astype(img.dtype)
    lbl_out = map_coordinates(np.asarray(labels), coords, order=0, mode="nearest")
    if not squeeze:
        img_out = img_out[np.newaxis]
    return img_out, lbl_out.astype(np.asarray(labels).dtype)
