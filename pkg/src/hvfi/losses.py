"""Multi-scale L1 + census training loss.

The census descriptor compares each pixel against its 48 neighbors in a 7x7
patch through a soft sign, making the photometric term invariant to global
brightness shifts. Descriptor slots whose neighbor falls outside the image
are exactly zero, so the invariance also holds at borders.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (ShapeError, Tensor, absolute, bilinear_resize, concat,
                       getitem, mean_, pad2d, power, sum_)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOFT_SIGN_EPS = 0.01        # epsilon of the soft sign (x / sqrt(x^2 + eps^2))
HAMMING_SAT = 0.1           # saturation constant of the soft Hamming distance
CHARBONNIER_EPS = 0.01      # generalized Charbonnier shift
CHARBONNIER_EXP = 0.4       # generalized Charbonnier exponent


def to_grayscale(img):
    """(1, 3, h, w) RGB -> (1, 1, h, w) luma; (1, 1, h, w) passes through."""
    if img.shape[1] == 1:
        return img
    if img.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 channels, got shape {img.shape}")
    r = getitem(img, (slice(None), slice(0, 1)))
    g = getitem(img, (slice(None), slice(1, 2)))
    b = getitem(img, (slice(None), slice(2, 3)))
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def census_transform(img, patch=7):
    """Soft census descriptor: (1, c, h, w) image -> (1, p*p-1, h, w).

    Each slot holds phi(I_neighbor - I_center) with the soft sign phi;
    out-of-image neighbors contribute exactly zero.
    """
    if patch % 2 == 0:
        raise ValueError(f"patch size must be odd, got {patch}")
    gray = to_grayscale(img)
    h, w = gray.shape[-2], gray.shape[-1]
    r = patch // 2
    padded = pad2d(gray, (r, r, r, r))
    valid = np.pad(np.ones((h, w), dtype=gray.dtype), r)
    eps2 = SOFT_SIGN_EPS * SOFT_SIGN_EPS
    slots = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            sl = (slice(None), slice(None),
                  slice(r + dy, r + dy + h), slice(r + dx, r + dx + w))
            nb = getitem(padded, sl)
            d = nb - gray
            phi = d * power(d * d + eps2, -0.5)
            slots.append(phi * valid[sl[2], sl[3]])
    return concat(slots, axis=1)


def census_loss(pred, gt, patch=7):
    """Soft Hamming distance between census descriptors, Charbonnier-averaged."""
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    d = census_transform(pred, patch) - census_transform(gt, patch)
    d2 = d * d
    ham = sum_(d2 * power(d2 + HAMMING_SAT, -1.0), axis=1)  # (1, h, w)
    return mean_(power(ham + CHARBONNIER_EPS, CHARBONNIER_EXP))


def l1_loss(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return mean_(absolute(pred - gt))


def gt_pyramid(gt, levels):
    """Ground truth at each stage resolution, coarse-to-fine (bilinear x0.5)."""
    pyr = [gt]
    for _ in range(levels - 1):
        pyr.append(bilinear_resize(pyr[-1], 0.5))
    return pyr[::-1]


def total_loss(stage_outputs, gt):
    """Sum over stages of mean L1 + census against the downsampled target.

    Returns (total, per_stage_l1, per_stage_census); the components are
    detached floats for logging.
    """
    targets = gt_pyramid(gt, len(stage_outputs))
    if len(stage_outputs) != len(targets):
        raise ShapeError("stage count mismatch")
    total = None
    l1s, cens = [], []
    for out, tgt in zip(stage_outputs, targets):
        if out.shape != tgt.shape:
            raise ShapeError(
                f"stage output {out.shape} does not match target {tgt.shape}")
        l1 = l1_loss(out, tgt)
        cen = census_loss(out, tgt)
        term = l1 + cen
        total = term if total is None else total + term
        l1s.append(float(l1.data))
        cens.append(float(cen.data))
    return total, l1s, cens
