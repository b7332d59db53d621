"""PSNR / SSIM metrics and evaluation runs over triplet datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import LUMA_WEIGHTS

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
        return np.tensordot(w, img, axes=([0], [0]))
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (3,H,W) or (H,W) image, got shape {img.shape}")


def _window_view(img: np.ndarray, size: int) -> np.ndarray:
    # (H-size+1, W-size+1, size, size) sliding windows, valid positions only.
    return np.lib.stride_tricks.sliding_window_view(img, (size, size))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean windowed SSIM on luma; 11x11 Gaussian window, dynamic range 1."""
    ga, gb = _to_luma(a), _to_luma(b)
    if ga.shape != gb.shape:
        raise ValueError(f"ssim shape mismatch: {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"image {h}x{w} smaller than SSIM window {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    va, vb = _window_view(ga, SSIM_WINDOW), _window_view(gb, SSIM_WINDOW)
    mu_a = np.einsum("ijkl,kl->ij", va, win)
    mu_b = np.einsum("ijkl,kl->ij", vb, win)
    ea_a = np.einsum("ijkl,kl->ij", va * va, win)
    eb_b = np.einsum("ijkl,kl->ij", vb * vb, win)
    ea_b = np.einsum("ijkl,kl->ij", va * vb, win)
    var_a = ea_a - mu_a ** 2
    var_b = eb_b - mu_b ** 2
    cov = ea_b - mu_a * mu_b
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def oracle_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Double-loop reference SSIM for testing the vectorized version."""
    ga, gb = _to_luma(a), _to_luma(b)
    h, w = ga.shape
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    vals = []
    for i in range(h - SSIM_WINDOW + 1):
        for j in range(w - SSIM_WINDOW + 1):
            pa = ga[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW]
            pb = gb[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW]
            mu_a = float((pa * win).sum())
            mu_b = float((pb * win).sum())
            var_a = float((pa * pa * win).sum()) - mu_a ** 2
            var_b = float((pb * pb * win).sum()) - mu_b ** 2
            cov = float((pa * pb * win).sum()) - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(vals))


@dataclass
class EvalReport:
    model_id: str
    per_interval: dict = field(default_factory=dict)  # i -> {"psnr","ssim","count"}
    sample_count: int = 0

    def to_tsv(self) -> str:
        lines = ["interval\tcount\tpsnr\tssim"]
        for i in sorted(self.per_interval):
            row = self.per_interval[i]
            lines.append(f"{i}\t{row['count']}\t{row['psnr']:.4f}\t{row['ssim']:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "model_id": self.model_id,
            "sample_count": self.sample_count,
            "per_interval": {str(i): self.per_interval[i]
                             for i in sorted(self.per_interval)},
        }, indent=2) + "\n"


def eval_run(predict, dataset, intervals=(1, 2, 3, 4), model_id="model") -> EvalReport:
    """Evaluate `predict(frame_a, frame_b) -> image` over a triplet dataset.

    Samples are grouped by their `interval` field; only requested intervals
    are reported. Means are plain arithmetic means in dataset order.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    intervals = sorted(set(int(i) for i in intervals))
    sums = {i: [0.0, 0.0, 0] for i in intervals}
    total = 0
    for trip in dataset:
        i = int(trip.interval)
        if i not in sums:
            continue
        pred = predict(trip.frame_a, trip.frame_b)
        sums[i][0] += psnr(pred, trip.target)
        sums[i][1] += ssim(pred, trip.target)
        sums[i][2] += 1
        total += 1
    report = EvalReport(model_id=model_id, sample_count=total)
    for i in intervals:
        s_psnr, s_ssim, n = sums[i]
        if n:
            report.per_interval[i] = {
                "psnr": s_psnr / n, "ssim": s_ssim / n, "count": n}
    return report
