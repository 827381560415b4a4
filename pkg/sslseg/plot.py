"""
Dice-vs-N figure written as a standalone SVG, and PNG overlays of predicted
labels on test volumes.
"""
import cv2
import numpy as np

from .io import atomic_write

WIDTH, HEIGHT = 480, 360
MARGIN = {"left": 64, "right": 120, "top": 24, "bottom": 56}
COLORS = {"contrastive": "#1f77b4", "regression": "#2ca02c", "none": "#d62728"}
FALLBACK_COLORS = ("#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
# class 1 olive, class 2 cyan, then orange and purple
CLASS_COLORS = np.array([[128, 128, 0], [0, 255, 255], [255, 127, 14], [148, 103, 189]],
                        np.uint8)


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.
    return lambda v: a + (v - lo) / span * (b - a)


def dice_vs_n_svg(filename, series, baseline=None, ylim=(0., 1.)):
    """
    Plot mean Dice against the number of training subjects on a log2 axis.

    Args:
        filename (str): output .svg path.
        series (dict): method -> list of (N, mean Dice), one polyline each.
        baseline (float, optional): full-data supervised Dice, drawn dashed.
        ylim (tuple): Dice axis range.

    Returns:
        str: the SVG text that was written.
    """
    ns = sorted({n for pts in series.values() for n, _ in pts}) or [1]
    lx = np.log2(ns)
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    sx = _scale(lx.min() - 0.25, lx.max() + 0.25, x0, x1)
    sy = _scale(ylim[0], ylim[1], y0, y1)

    el = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
          f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
          f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
          f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
          f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']
    for n in ns:
        x = sx(np.log2(n))
        el.append(f'<line x1="{x:.1f}" y1="{y0}" x2="{x:.1f}" y2="{y0 + 4}" stroke="black"/>')
        el.append(f'<text x="{x:.1f}" y="{y0 + 18}" text-anchor="middle">{n}</text>')
    for t in np.linspace(ylim[0], ylim[1], 6):
        y = sy(t)
        el.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        el.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" text-anchor="end">{t:.1f}</text>')
    el.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 16}" text-anchor="middle">'
              'number of training subjects</text>')
    el.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
              f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">Dice</text>')

    legend_y = MARGIN["top"] + 8
    for k, method in enumerate(sorted(series)):
        color = COLORS.get(method, FALLBACK_COLORS[k % len(FALLBACK_COLORS)])
        pts = sorted(series[method])
        coords = " ".join(f"{sx(np.log2(n)):.1f},{sy(d):.1f}" for n, d in pts)
        el.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for n, d in pts:
            el.append(f'<circle cx="{sx(np.log2(n)):.1f}" cy="{sy(d):.1f}" r="3" fill="{color}"/>')
        ly = legend_y + 18 * k
        el.append(f'<line x1="{x1 + 12}" y1="{ly}" x2="{x1 + 32}" y2="{ly}" stroke="{color}" '
                  'stroke-width="2"/>')
        el.append(f'<text x="{x1 + 38}" y="{ly + 4}">{method}</text>')
    if baseline is not None:
        y = sy(baseline)
        el.append(f'<line x1="{x0}" y1="{y:.1f}" x2="{x1}" y2="{y:.1f}" stroke="black" '
                  'stroke-dasharray="6,4"/>')
        ly = legend_y + 18 * len(series)
        el.append(f'<line x1="{x1 + 12}" y1="{ly}" x2="{x1 + 32}" y2="{ly}" stroke="black" '
                  'stroke-dasharray="6,4"/>')
        el.append(f'<text x="{x1 + 38}" y="{ly + 4}">baseline</text>')
    el.append("</svg>")
    svg = "\n".join(el) + "\n"
    atomic_write(filename, svg.encode("utf-8"))
    return svg


def mask_overlay(img, labels, colors=None):
    """Overlay class labels on an image (set image to grayscale).

    Args:
        img (float, 2D array): image [Ly x Lx] in [0, 1].
        labels (int, 2D array): labels where 0=background; 1,2,...=classes.
        colors (uint8, 2D array, optional): size [nclasses x 3] RGB in 0-255,
            defaults to CLASS_COLORS.

    Returns:
        RGB (uint8, 3D array): labeled pixels take the class hue at full
        saturation, background stays gray.
    """
    img = np.asarray(img, np.float32)
    labels = np.asarray(labels)
    if img.shape != labels.shape or img.ndim != 2:
        raise ValueError(f"mask_overlay needs matching 2D image and labels, got "
                         f"{img.shape} and {labels.shape}")
    colors = CLASS_COLORS if colors is None else np.asarray(colors, np.uint8)
    nclasses = int(labels.max()) if labels.size else 0
    if nclasses > len(colors):
        raise ValueError(f"{nclasses} classes but only {len(colors)} colors")
    hues = cv2.cvtColor(colors[np.newaxis].astype(np.float32) / 255., cv2.COLOR_RGB2HSV)[0]

    HSV = np.zeros((*img.shape, 3), np.float32)
    HSV[:, :, 2] = np.clip(img * 1.5, 0, 1)
    for n in range(nclasses):
        ipix = (labels == n + 1).nonzero()
        HSV[ipix[0], ipix[1], 0] = hues[n, 0]
        HSV[ipix[0], ipix[1], 1] = 1.0
    RGB = np.clip(cv2.cvtColor(HSV, cv2.COLOR_HSV2RGB), 0, 1)
    return (RGB * 255).round().astype(np.uint8)


def outline_view(rgb, labels, color=(255, 255, 255)):
    """Draw the inner boundary of every labeled class onto an RGB image."""
    imgout = rgb.copy()
    kernel = np.ones((3, 3), np.uint8)
    for c in np.unique(labels):
        if c == 0:
            continue
        m = (labels == c).astype(np.uint8)
        outline = m > cv2.erode(m, kernel)
        imgout[outline] = color
    return imgout


def volume_overlay_png(filename, slices, pred_labels, gt_labels=None, title=""):
    """
    Save one test volume as a PNG: slices side by side, predicted classes
    filled in color, ground-truth boundaries in white, title strip on top.

    Args:
        filename (str): output .png path.
        slices (np.ndarray): [S x 1 x Ly x Lx] or [S x Ly x Lx] images in [0, 1].
        pred_labels (np.ndarray): [S x Ly x Lx] predicted labels.
        gt_labels (np.ndarray, optional): [S x Ly x Lx] ground truth.
        title (str): text for the title strip, e.g. the volume Dice.

    Returns:
        RGB (uint8, 3D array): the image that was written.
    """
    slices = np.asarray(slices)
    if slices.ndim == 4:
        slices = slices[:, 0]
    panels = []
    for s in range(len(slices)):
        panel = mask_overlay(slices[s], pred_labels[s])
        if gt_labels is not None:
            panel = outline_view(panel, gt_labels[s])
        panels.append(panel)
    montage = np.concatenate(panels, axis=1)
    header = np.zeros((20, montage.shape[1], 3), np.uint8)
    cv2.putText(header, title, (4, 14), cv2.FONT_HERSHEY_SIMPLEX, 0.4, (255, 255, 255), 1,
                cv2.LINE_AA)
    RGB = np.concatenate((header, montage), axis=0)
    ok, buf = cv2.imencode(".png", cv2.cvtColor(RGB, cv2.COLOR_RGB2BGR))
    if not ok:
        raise ValueError(f"could not encode {filename} as PNG")
    atomic_write(filename, buf.tobytes())
    return RGB
