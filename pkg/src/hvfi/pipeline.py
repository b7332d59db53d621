"""Coarse-to-fine deformable kernel estimation and the end-to-end model.

Stage s (1 = coarsest) upscales the previous stage's kernel field, predicts a
residual from intermediate warps plus pyramid features, applies the updated
kernels to both input frames, and fuses the two warps through a gated
refinement block. The finest stage's fused output is the interpolated frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ShapeError, Tensor, bilinear_resize, concat, getitem,
                       mul, relu, sigmoid)
from .deformconv import DeformableKernel, deform_conv
from .hvit import HVIT, HVITB, HVITBConfig
from .nn import Conv2d, Module
from .hvit import RCAB


@dataclass
class ModelConfig:
    levels: int = 3          # L; paper uses 4
    kernel_size: int = 5     # n; paper value
    cab_count: int = 2       # M; paper uses 4
    embed_dim: int = 16      # paper uses 32 (64 for the large variant)
    window_size: int = 4
    num_heads: int = 2
    rcab_layers: int = 1
    udblock_width: int = 16
    residual_update: bool = True  # False = regress kernels from scratch per stage

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    def hvitb(self):
        return HVITBConfig(self.embed_dim, self.window_size, self.num_heads,
                           self.rcab_layers)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class StageState:
    level: int                       # 1..L, 1 = coarsest
    dek: tuple                       # (DeformableKernel, DeformableKernel)
    inter_frames: tuple              # warps under the upscaled previous kernel
    interp: tuple                    # warps under the updated kernel
    fusion_mask: Tensor
    fusion_bias: Tensor
    stage_output: Tensor             # fused output, unclamped


def upscale_dek(dek: DeformableKernel) -> DeformableKernel:
    """Double the kernel field's resolution; offset values are magnified by
    the x2 relative scale, kernels and masks are only resampled."""
    up = lambda t: bilinear_resize(t, 2)
    return DeformableKernel(
        x_offsets=mul(up(dek.x_offsets), 2.0),
        y_offsets=mul(up(dek.y_offsets), 2.0),
        kernel_v=up(dek.kernel_v),
        kernel_h=up(dek.kernel_h),
        mask=up(dek.mask),
        n=dek.n,
    )


def update_dek(up: DeformableKernel, delta: DeformableKernel,
               residual=True) -> DeformableKernel:
    """Offsets accumulate across stages; kernels and masks are re-predicted.

    residual=False is the ablation variant where offsets too are taken
    directly from the fresh prediction.
    """
    if up.spatial != delta.spatial or up.n != delta.n:
        raise ShapeError(
            f"kernel fields differ: {up.spatial}/n={up.n} vs {delta.spatial}/n={delta.n}")
    if residual:
        xo = up.x_offsets + delta.x_offsets
        yo = up.y_offsets + delta.y_offsets
    else:
        xo, yo = delta.x_offsets, delta.y_offsets
    return DeformableKernel(xo, yo, delta.kernel_v, delta.kernel_h,
                            delta.mask, delta.n)


class DeformableHead(Module):
    """Five parallel branches predicting x-offsets, y-offsets, vertical
    kernel, horizontal kernel and (sigmoid) mask.

    All branches consume the same feature; each branch's trunk is shared
    between the two frames, with a per-frame output conv. Output convs start
    near zero (small random weights) so early kernels stay close to the
    neutral configuration; kernel branches carry a center-tap bias of 1 so
    the separable outer product is not the all-zero saddle at init.
    """

    def __init__(self, width, n, rng, rcab_layers=1):
        self.n = n
        self.branches = []
        for kind, out_ch in (("xo", n * n), ("yo", n * n), ("kv", n),
                             ("kh", n), ("mask", n * n)):
            trunk = RCAB(width, rcab_layers, rng)
            finals = [Conv2d(width, out_ch, 3, rng, gain=0.05) for _ in range(2)]
            if kind in ("kv", "kh"):
                for conv in finals:
                    conv.bias.data[n // 2] = 1.0
            elif kind == "mask":
                # saturate the sigmoid towards 1 so the initial warp is a
                # near-identity copy rather than a half-brightness image
                for conv in finals:
                    conv.bias.data[:] = 3.0
            self.branches.append((trunk, finals))
        self.flat = [m for trunk, finals in self.branches for m in (trunk, *finals)]

    def forward(self, feat):
        """Returns the residual kernel pair (frame t=1, t=2)."""
        outs = []
        for trunk, finals in self.branches:
            x = trunk(feat)
            outs.append([getitem(conv(x), 0) for conv in finals])  # (ch, h, w)
        (xo, yo, kv, kh, mask) = outs
        return tuple(
            DeformableKernel(xo[t], yo[t], kv[t], kh[t], sigmoid(mask[t]), self.n)
            for t in range(2))


class UDBlock(Module):
    """Predict the per-stage kernel residual from the upscaled kernels,
    the warps they produce, the input frames and the pyramid features."""

    def __init__(self, cfg: ModelConfig, rng):
        w = cfg.udblock_width
        self.in_proj = Conv2d(12, w, 3, rng)
        self.cabs = [RCAB(w, 1, rng) for _ in range(cfg.cab_count)]
        self.fuse = Conv2d(w + cfg.embed_dim, w, 3, rng)
        self.head = DeformableHead(w, cfg.kernel_size, rng, cfg.rcab_layers)

    def forward(self, dek_up, feat, frames):
        """dek_up/frames: pairs (t=1,2); feat: (1, embed, h, w).

        Returns (delta kernel pair, intermediate warp pair).
        """
        h, w = feat.shape[-2], feat.shape[-1]
        for f in frames:
            if (f.shape[-2], f.shape[-1]) != (h, w):
                raise ShapeError(
                    f"frame {f.shape} does not match feature resolution {(h, w)}")
        inter = tuple(deform_conv(frames[t], dek_up[t]) for t in range(2))
        x = concat([inter[0], inter[1], frames[0], frames[1]], axis=1)
        x = self.in_proj(x)
        for cab in self.cabs:
            x = cab(x)
        x = self.fuse(concat([x, feat], axis=1))
        delta = self.head(x)
        return delta, inter


def stage_interpolate(frames, deks):
    """Warp each input frame with its updated kernel field."""
    return tuple(deform_conv(frames[t], deks[t]) for t in range(2))


def gated_fusion(i0, i1, mask, bias):
    """out = i0 * mask + i1 * (1 - mask) + bias."""
    return mul(i0, mask) + mul(i1, 1.0 - mask) + bias


class TGR(Module):
    """Temporal gated refinement: an attention block over the two warps and
    the input frames emits a soft blend mask and an additive bias."""

    def __init__(self, cfg: ModelConfig, rng):
        dim = cfg.embed_dim
        self.proj = Conv2d(12, dim, 3, rng)
        self.block = HVITB(cfg.hvitb(), rng, cross=False)
        # near-zero init: fusion starts close to a plain average of the warps
        self.head = Conv2d(dim, 4, 3, rng, gain=0.05)

    def forward(self, interp, frames):
        x = concat([interp[0], interp[1], frames[0], frames[1]], axis=1)
        out = self.head(self.block(self.proj(x)))
        mask = sigmoid(getitem(out, (slice(None), slice(0, 1))))
        bias = getitem(out, (slice(None), slice(1, 4)))
        fused = gated_fusion(interp[0], interp[1], mask, bias)
        return fused, mask, bias


class HVFIModel(Module):
    """End-to-end interpolator: feature pyramid, per-stage kernel updating,
    per-stage warping and gated fusion."""

    def __init__(self, cfg: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.hvit = HVIT(6, cfg.levels, cfg.hvitb(), rng)
        self.udblocks = [UDBlock(cfg, rng) for _ in range(cfg.levels)]
        self.tgrs = [TGR(cfg, rng) for _ in range(cfg.levels)]

    def frame_pyramid(self, frame):
        """Repeated bilinear halving; returns levels coarse-to-fine."""
        pyr = [frame]
        for _ in range(self.cfg.levels - 1):
            pyr.append(bilinear_resize(pyr[-1], 0.5))
        return pyr[::-1]

    def forward(self, frame0, frame1):
        """frame0/frame1: (1, 3, H, W) in [0, 1]. Returns list of StageState,
        coarsest first; the last stage_output is the interpolated frame."""
        cfg = self.cfg
        if frame0.shape != frame1.shape:
            raise ShapeError(f"frame shapes differ: {frame0.shape} vs {frame1.shape}")
        h, w = frame0.shape[-2], frame0.shape[-1]
        div = 2 ** (cfg.levels - 1)
        if h % div or w % div:
            raise ShapeError(
                f"input {h}x{w} must be divisible by 2^(L-1) = {div} for L={cfg.levels}")

        pyr0 = self.frame_pyramid(frame0)
        pyr1 = self.frame_pyramid(frame1)
        feats = self.hvit(concat([frame0, frame1], axis=1))

        n = cfg.kernel_size
        ch, cw = h // div, w // div
        dek = tuple(DeformableKernel.zeros(n, ch, cw, dtype=frame0.dtype)
                    for _ in range(2))
        states = []
        for s in range(cfg.levels):
            frames = (pyr0[s], pyr1[s])
            dek_up = dek if s == 0 else tuple(upscale_dek(d) for d in dek)
            delta, inter = self.udblocks[s](dek_up, feats[s], frames)
            dek = tuple(update_dek(dek_up[t], delta[t], cfg.residual_update)
                        for t in range(2))
            interp = stage_interpolate(frames, dek)
            fused, mask, bias = self.tgrs[s](interp, frames)
            states.append(StageState(level=s + 1, dek=dek, inter_frames=inter,
                                     interp=interp, fusion_mask=mask,
                                     fusion_bias=bias, stage_output=fused))
        return states

    def interpolate(self, frame0, frame1):
        """Final-stage output only, clamped to [0, 1] (plain ndarray)."""
        states = self.forward(frame0, frame1)
        return np.clip(states[-1].stage_output.data, 0.0, 1.0)
