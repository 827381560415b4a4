"""
Synthetic phantom cohorts: slice stacks with a smooth background, a few
elliptical structures with multiplicative texture, and a label map of one
designated target structure.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from . import utils
from .io import Volume
from .transforms import normalize_unit

synth_logger = logging.getLogger(__name__)
tqdm_out = utils.TqdmToLogger(synth_logger, level=logging.INFO)

# smallest target we agree to draw, in pixels
MIN_TARGET_PIXELS = 16
# fraction of the area range kept free on both sides of the drawn target area
AREA_MARGIN = 0.1


@dataclass
class PhantomConfig:
    size: int = 128
    n_slices: int = 8
    n_organs: Tuple[int, int] = (1, 3)
    area_fraction: Tuple[float, float] = (0.05, 0.30)
    texture_noise: float = 0.1
    background_intensity: Tuple[float, float] = (0.05, 0.3)
    target_intensity: Tuple[float, float] = (0.65, 1.0)
    distractor_intensity: Tuple[float, float] = (0.3, 0.6)
    n_label_classes: int = 1
    core_scale: float = 0.55
    core_contrast: float = 0.75
    seed: int = 0

    def validate(self, divisor=1):
        """Raise ValueError when the phantom cannot be drawn as configured.

        Args:
            divisor (int): the image size must be a multiple of it (2^depth of
                the model that will consume the phantoms).
        """
        if self.size < 8 or self.size % divisor:
            raise ValueError(f"phantom size {self.size} must be >= 8 and divisible by {divisor}")
        if self.n_slices < 1:
            raise ValueError(f"n_slices={self.n_slices} must be >= 1")
        lo, hi = self.n_organs
        if not 1 <= lo <= hi:
            raise ValueError(f"n_organs range {self.n_organs} must satisfy 1 <= lo <= hi")
        lo, hi = self.area_fraction
        if not 0 < lo <= hi < 1:
            raise ValueError(f"area_fraction range {self.area_fraction} must lie in (0, 1)")
        # an ellipse kept inside the image cannot cover much more than half of it
        if hi > 0.5:
            raise ValueError(f"area_fraction upper bound {hi} > 0.5 cannot be satisfied")
        if lo * self.size**2 < MIN_TARGET_PIXELS:
            raise ValueError(f"area_fraction lower bound {lo} gives fewer than "
                             f"{MIN_TARGET_PIXELS} target pixels at size {self.size}")
        for name in ("background_intensity", "target_intensity", "distractor_intensity"):
            a, b = getattr(self, name)
            if not 0 <= a <= b <= 1:
                raise ValueError(f"{name} range {(a, b)} must be ordered within [0, 1]")
        if self.texture_noise < 0:
            raise ValueError(f"texture_noise={self.texture_noise} must be >= 0")
        if self.n_label_classes not in (1, 2):
            raise ValueError(f"n_label_classes={self.n_label_classes} must be 1 or 2")
        if not 0 < self.core_scale < 1:
            raise ValueError(f"core_scale={self.core_scale} must lie in (0, 1)")
        return self

    @property
    def num_classes(self):
        """ classes including background """
        return self.n_label_classes + 1


def subject_id(index):
    return f"phantom_{index:04d}"


def _ellipse(yy, xx, cy, cx, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    return (u / max(a, 1e-6))**2 + (v / max(b, 1e-6))**2 <= 1.


def _fit_scale(yy, xx, cy, cx, a0, b0, theta, n_target):
    """ smallest scale whose ellipse covers at least n_target pixels, by bisection """
    lo, hi = 0., 2. * yy.shape[0] / min(a0, b0)
    if _ellipse(yy, xx, cy, cx, hi * a0, hi * b0, theta).sum() < n_target:
        return None
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _ellipse(yy, xx, cy, cx, mid * a0, mid * b0, theta).sum() >= n_target:
            hi = mid
        else:
            lo = mid
    return hi


def _smooth_field(rng, shape, sigma):
    field = gaussian_filter(rng.normal(size=shape), sigma)
    field -= field.min()
    peak = field.max()
    return field / peak if peak > 0 else field


def generate_subject(config, index):
    """Draw one phantom subject, deterministic in (config.seed, index).

    Returns:
        tuple: (raw image stack [S x Ly x Lx] float64, labels [S x Ly x Lx] uint8).
    """
    rng = utils.rng_stream(config.seed, index)
    L, S = config.size, config.n_slices
    yy, xx = np.meshgrid(np.arange(L, dtype=np.float64), np.arange(L, dtype=np.float64),
                         indexing="ij")
    lo, hi = config.area_fraction
    margin = AREA_MARGIN * (hi - lo)
    n_organs = int(rng.integers(config.n_organs[0], config.n_organs[1] + 1))

    # subject-level shape of the target and its drift through the slices
    aspect = rng.uniform(0.6, 1.0)
    theta0 = rng.uniform(0, np.pi)
    cy0, cx0 = rng.uniform(0.4 * L, 0.6 * L, size=2)
    level = rng.uniform(0, 1)
    area_profile = level + 0.3 * np.sin(np.linspace(0, np.pi, S) + rng.uniform(0, np.pi))
    area_profile = np.clip(area_profile, 0, 1)
    target_intensity = rng.uniform(*config.target_intensity)

    distractors = []
    for _ in range(n_organs - 1):
        distractors.append((rng.uniform(0.15 * L, 0.85 * L, size=2),
                            rng.uniform(0.05 * L, 0.15 * L, size=2),
                            rng.uniform(0, np.pi),
                            rng.uniform(*config.distractor_intensity)))

    background = config.background_intensity[0] + np.diff(config.background_intensity)[0] * \
        _smooth_field(rng, (L, L), L / 8)

    images = np.zeros((S, L, L), np.float64)
    labels = np.zeros((S, L, L), np.uint8)
    for s in range(S):
        img = background.copy()
        for (cy, cx), (a, b), theta, intensity in distractors:
            img[_ellipse(yy, xx, cy + rng.normal(0, 1), cx + rng.normal(0, 1), a, b, theta)] = intensity

        target_fraction = lo + margin + (hi - lo - 2 * margin) * area_profile[s]
        n_target = int(np.ceil(target_fraction * L * L))
        cy, cx = cy0 + rng.normal(0, 0.01 * L), cx0 + rng.normal(0, 0.01 * L)
        theta = theta0 + rng.normal(0, 0.05)
        scale = _fit_scale(yy, xx, cy, cx, 1., aspect, theta, n_target)
        if scale is None:
            error_message = f"cannot fit a target of {n_target} pixels in a {L}x{L} image"
            synth_logger.critical(error_message)
            raise ValueError(error_message)
        organ = _ellipse(yy, xx, cy, cx, scale, scale * aspect, theta)
        fraction = organ.mean()
        if not lo <= fraction <= hi:
            error_message = (f"target area fraction {fraction:.4f} outside {config.area_fraction} "
                             f"at size {L}")
            synth_logger.critical(error_message)
            raise ValueError(error_message)
        img[organ] = target_intensity
        labels[s][organ] = 1
        if config.n_label_classes == 2:
            core = _ellipse(yy, xx, cy, cx, scale * config.core_scale,
                            scale * aspect * config.core_scale, theta)
            img[core] = target_intensity * config.core_contrast
            labels[s][organ] = 2
            labels[s][core] = 1

        texture = gaussian_filter(rng.normal(size=(L, L)), 1.0)
        texture /= max(texture.std(), 1e-12)
        images[s] = img * np.clip(1. + config.texture_noise * texture, 0., None)
    return images, labels


def generate_phantom_dataset(config, n_subjects, start=0, with_labels=True):
    """
    Generate a phantom cohort.

    Args:
        config (PhantomConfig): phantom parameters.
        n_subjects (int): number of subjects.
        start (int): index of the first subject; subject i depends only on
            (config.seed, i), so cohorts can be generated in pieces.
        with_labels (bool): keep the label maps.

    Returns:
        list of Volume: slices normalized to [0, 1] per volume.
    """
    config.validate()
    if n_subjects < 0:
        raise ValueError(f"n_subjects={n_subjects} must be >= 0")
    synth_logger.info(f"generating {n_subjects} phantoms of {config.n_slices}x"
                      f"{config.size}x{config.size}, seed={config.seed}")
    volumes = []
    for index in tqdm(range(start, start + n_subjects), file=tqdm_out, mininterval=30):
        images, labels = generate_subject(config, index)
        slices = normalize_unit(images)[:, np.newaxis]
        volumes.append(Volume(subject_id(index), slices, labels if with_labels else None))
    return volumes
