"""Synthetic moving-shapes triplets and the augmentation protocol.

Each sample renders a handful of textured shapes translating linearly over a
textured background, captured at times 0, 0.5 and 1; the middle frame is the
interpolation target. Shape displacement is controlled, which stands in for
the interval-based motion-magnitude protocol of real datasets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import imgio

SUPERSAMPLE = 4


@dataclass
class FrameTriplet:
    frame_a: np.ndarray        # (3, h, w) float32 in [0, 1]
    frame_b: np.ndarray
    target: np.ndarray         # ground-truth middle frame
    interval: int = 1
    motion_px: float = 0.0     # max shape displacement between the endpoints
    motion_vec: tuple = (0.0, 0.0)  # (dx, dy) of the fastest shape

    def __post_init__(self):
        if not (self.frame_a.shape == self.frame_b.shape == self.target.shape):
            raise ValueError("triplet frames must share one shape")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")


def _smooth_noise(rng, size, cells, channels=3):
    """Low-frequency texture: coarse noise bilinearly stretched to size."""
    coarse = rng.random((channels, cells, cells))
    ys = np.linspace(0, cells - 1, size)
    xs = np.linspace(0, cells - 1, size)
    y0 = np.clip(ys.astype(int), 0, cells - 2)
    x0 = np.clip(xs.astype(int), 0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[:, y0][:, :, x0]
    b = coarse[:, y0][:, :, x0 + 1]
    c = coarse[:, y0 + 1][:, :, x0]
    d = coarse[:, y0 + 1][:, :, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _sine_waves(rng, size, count=4):
    """Random sinusoid parameters: rows of (fx, fy, phase, amplitude).

    Continuous in the coordinates, so a fill evaluated in shape-relative
    coordinates translates exactly with the shape (no resampling error).
    """
    waves = np.empty((count, 4))
    for i in range(count):
        wavelength = rng.uniform(size / 16, size / 3)
        ang = rng.uniform(0, 2 * np.pi)
        waves[i] = (np.cos(ang) / wavelength, np.sin(ang) / wavelength,
                    rng.uniform(0, 2 * np.pi), rng.uniform(0.04, 0.12))
    return waves

def _eval_waves(waves, xx, yy):
    out = np.zeros_like(xx)
    for fx, fy, phase, amp in waves:
        out = out + amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return out


def _shape_fill(rng, kind, size):
    """Returns fill(x_rel, y_rel) -> (3, ...) evaluated in shape-relative
    coordinates, so the texture rides along with the moving shape."""
    base = rng.random(3) * 0.9 + 0.05
    if kind == "solid":
        return lambda xr, yr: base[:, None, None] * np.ones_like(xr)[None]
    if kind == "gradient":
        other = rng.random(3) * 0.9 + 0.05
        waves = _sine_waves(rng, size, count=2)
        def gradient(xr, yr):
            t = np.clip(0.5 + (xr + yr) / (2 * size), 0.0, 1.0)
            mix = base[:, None, None] * (1 - t)[None] + other[:, None, None] * t[None]
            return np.clip(mix + _eval_waves(waves, xr, yr)[None], 0, 1)
        return gradient
    waves = _sine_waves(rng, size, count=5)
    per_chan = rng.uniform(0.5, 1.0, 3)
    def texture(xr, yr):
        tex = _eval_waves(waves, xr, yr)
        return np.clip(base[:, None, None] + per_chan[:, None, None] * tex[None],
                       0, 1)
    return texture


def _render_frame(size, bg, shapes, t):
    """Composite shapes at time t onto the supersampled background."""
    ss = SUPERSAMPLE
    big = size * ss
    yy, xx = np.mgrid[0:big, 0:big] / ss  # pixel units at target scale
    canvas = bg.copy()
    for sh in shapes:
        cx = sh["x"] + t * sh["dx"]
        cy = sh["y"] + t * sh["dy"]
        if sh["kind"] == "circle":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= sh["r"] ** 2
        else:
            mask = (np.abs(xx - cx) <= sh["w"] / 2) & (np.abs(yy - cy) <= sh["h"] / 2)
        canvas = np.where(mask[None], sh["fill"](xx - cx, yy - cy), canvas)
    # box-average the supersampled canvas (anti-aliasing)
    c = canvas.reshape(3, size, ss, size, ss).mean(axis=(2, 4))
    return c.astype(np.float32)


def gen_synthetic(count, size, motion_range, seed, interval=1):
    """Deterministic list of FrameTriplet with max displacement in
    motion_range (pixels between the two input frames)."""
    lo, hi = motion_range
    if hi >= size / 2:
        raise ValueError(f"motion bound {hi} too large for image size {size}")
    if lo > hi or lo < 0:
        raise ValueError(f"bad motion range {motion_range}")
    rng = np.random.default_rng(seed)
    triplets = []
    big = size * SUPERSAMPLE
    gy, gx = np.mgrid[0:big, 0:big] / SUPERSAMPLE
    for _ in range(count):
        # supersampled background: low-frequency color plus finer octaves so
        # 7x7 census patches are contrast-dominated rather than noise-dominated
        bg_waves = _sine_waves(rng, size, count=4)
        bg = np.clip(_smooth_noise(rng, big, 8) * 0.5 + 0.25
                     + _eval_waves(bg_waves, gx, gy)[None], 0, 1)
        n_shapes = int(rng.integers(2, 6))
        mags = rng.uniform(lo, hi, n_shapes)
        mags[0] = hi if hi == lo else rng.uniform(max(lo, 0.75 * hi), hi)
        shapes = []
        for mag in mags:
            ang = rng.uniform(0, 2 * np.pi)
            dx, dy = mag * np.cos(ang), mag * np.sin(ang)
            margin = size / 6
            sh = {
                "kind": rng.choice(["circle", "rect"]),
                "x": rng.uniform(margin, size - margin) - dx / 2,
                "y": rng.uniform(margin, size - margin) - dy / 2,
                "dx": dx, "dy": dy,
                "r": rng.uniform(size / 12, size / 5),
                "w": rng.uniform(size / 8, size / 3),
                "h": rng.uniform(size / 8, size / 3),
            }
            sh["fill"] = _shape_fill(
                rng, rng.choice(["solid", "gradient", "texture"]), size)
            shapes.append(sh)
        fastest = int(np.argmax(mags))
        frames = [_render_frame(size, bg, shapes, t) for t in (0.0, 0.5, 1.0)]
        triplets.append(FrameTriplet(
            frame_a=frames[0], frame_b=frames[2], target=frames[1],
            interval=interval, motion_px=float(np.max(mags)),
            motion_vec=(float(shapes[fastest]["dx"]), float(shapes[fastest]["dy"]))))
    return triplets


def augment(triplet: FrameTriplet, rng, crop):
    """Identical random crop + flips on all three frames; random temporal
    reversal swaps the input frames and keeps the target."""
    h, w = triplet.frame_a.shape[-2:]
    if h < crop or w < crop:
        raise ValueError(f"image {h}x{w} smaller than crop {crop}")
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    sl = (slice(None), slice(oy, oy + crop), slice(ox, ox + crop))
    a, b, t = triplet.frame_a[sl], triplet.frame_b[sl], triplet.target[sl]
    dx, dy = triplet.motion_vec
    if rng.random() < 0.5:  # horizontal flip
        a, b, t = a[:, :, ::-1], b[:, :, ::-1], t[:, :, ::-1]
        dx = -dx
    if rng.random() < 0.5:  # vertical flip
        a, b, t = a[:, ::-1], b[:, ::-1], t[:, ::-1]
        dy = -dy
    if rng.random() < 0.5:  # temporal reversal
        a, b = b, a
        dx, dy = -dx, -dy
    return replace(triplet,
                   frame_a=np.ascontiguousarray(a),
                   frame_b=np.ascontiguousarray(b),
                   target=np.ascontiguousarray(t),
                   motion_vec=(dx, dy))


# ---------------------------------------------------------------------------
# on-disk dataset layout: one directory per sample with three PNGs + metadata
# ---------------------------------------------------------------------------

def save_dataset(triplets, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, tr in enumerate(triplets):
        d = out / f"sample_{i:05d}"
        d.mkdir(exist_ok=True)
        imgio.write_image(d / "frame_a.png", tr.frame_a)
        imgio.write_image(d / "frame_b.png", tr.frame_b)
        imgio.write_image(d / "target.png", tr.target)
        meta = {"interval": tr.interval, "motion_px": tr.motion_px,
                "motion_vec": list(tr.motion_vec)}
        (d / "meta.json").write_text(json.dumps(meta))


def load_dataset(in_dir):
    root = Path(in_dir)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    if not dirs:
        raise FileNotFoundError(f"no sample_* directories under {root}")
    triplets = []
    for d in dirs:
        meta = json.loads((d / "meta.json").read_text())
        triplets.append(FrameTriplet(
            frame_a=imgio.read_image(d / "frame_a.png"),
            frame_b=imgio.read_image(d / "frame_b.png"),
            target=imgio.read_image(d / "target.png"),
            interval=int(meta.get("interval", 1)),
            motion_px=float(meta.get("motion_px", 0.0)),
            motion_vec=tuple(meta.get("motion_vec", (0.0, 0.0)))))
    return triplets
