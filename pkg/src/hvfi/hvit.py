"""Hierarchical feature extractor: windowed cross-scale attention blocks
composed into an L-level pyramid.

Each level runs one block combining window attention (queries from the
current scale, keys/values from the current scale plus the upsampled
next-coarser features), a residual channel attention branch scaled by a
learnable alpha, and a channel MLP. The pyramid is returned coarse-to-fine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ShapeError, Tensor, bilinear_resize, concat, gelu,
                       getitem, matmul, mul, pad2d, relu, reshape, sigmoid,
                       softmax, transpose)
from .nn import Conv2d, LayerNorm, Linear, Module, _param


@dataclass
class HVITBConfig:
    embed_dim: int = 16
    window_size: int = 4
    num_heads: int = 2
    rcab_layers: int = 1
    alpha_init: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")


@dataclass
class FeaturePyramid:
    """L feature maps, coarse (index 0) to fine (index L-1); spatial size
    doubles per level."""

    features: list

    def __post_init__(self):
        for lo, hi in zip(self.features, self.features[1:]):
            if (lo.shape[-2] * 2, lo.shape[-1] * 2) != (hi.shape[-2], hi.shape[-1]):
                raise ShapeError("pyramid levels must double in spatial size")

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]


def _pad_to_multiple(x, ws):
    h, w = x.shape[-2], x.shape[-1]
    ph = (-h) % ws
    pw = (-w) % ws
    if ph or pw:
        x = pad2d(x, (0, ph, 0, pw))
    return x, h, w


def _to_windows(x, ws):
    """(1, C, H, W) -> (num_windows, ws*ws, C); H, W multiples of ws."""
    _, c, h, w = x.shape
    nh, nw = h // ws, w // ws
    t = reshape(x, (c, nh, ws, nw, ws))
    t = transpose(t, (1, 3, 2, 4, 0))          # (nh, nw, ws, ws, C)
    return reshape(t, (nh * nw, ws * ws, c))


def _from_windows(xw, ws, c, h, w):
    nh, nw = h // ws, w // ws
    t = reshape(xw, (nh, nw, ws, ws, c))
    t = transpose(t, (4, 0, 2, 1, 3))          # (C, nh, ws, nw, ws)
    return reshape(t, (1, c, h, w))


class WindowAttention(Module):
    """Per-window multi-head scaled-dot-product attention.

    Queries come from x; keys/values from ctx_tokens (the caller concatenates
    same-scale and coarser-scale windows along the token axis). A learnable
    per-window bias table is added to the logits.
    """

    def __init__(self, dim, window, heads, rng, kv_windows=1):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.bias_table = _param(np.zeros((heads, window * window,
                                           kv_windows * window * window)))
        self.window = window
        self.heads = heads

    def forward(self, x, ctx=None):
        """x: (1, C, H, W); ctx: optional (1, C, H, W) extra key/value source."""
        ws, heads = self.window, self.heads
        _, c, h0, w0 = x.shape
        xp, h, w = _pad_to_multiple(x, ws)
        hp, wp = xp.shape[-2], xp.shape[-1]
        xw = _to_windows(xp, ws)                       # (nW, T, C)
        if ctx is not None:
            if ctx.shape != x.shape:
                raise ShapeError(f"ctx shape {ctx.shape} != x shape {x.shape}")
            cw = _to_windows(_pad_to_multiple(ctx, ws)[0], ws)
            kvw = concat([xw, cw], axis=1)             # (nW, 2T, C)
        else:
            kvw = xw
        n_w, t, _ = xw.shape
        tk = kvw.shape[1]
        dh = c // heads

        def split_heads(z, tokens):
            z = reshape(z, (n_w, tokens, heads, dh))
            return transpose(z, (0, 2, 1, 3))          # (nW, heads, tokens, dh)

        q = split_heads(self.q(xw), t)
        k = split_heads(self.k(kvw), tk)
        v = split_heads(self.v(kvw), tk)
        logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        if self.bias_table.shape[-1] != tk:
            raise ShapeError(
                f"bias table for {self.bias_table.shape[-1]} kv tokens, got {tk}")
        logits = logits + self.bias_table
        attn = softmax(logits, axis=-1)
        out = matmul(attn, v)                          # (nW, heads, T, dh)
        out = reshape(transpose(out, (0, 2, 1, 3)), (n_w, t, c))
        out = self.proj(out)
        res = _from_windows(out, ws, c, hp, wp)
        if (hp, wp) != (h0, w0):
            res = getitem(res, (slice(None), slice(None), slice(0, h0), slice(0, w0)))
        return res


class ChannelAttention(Module):
    """Global average pool -> bottleneck -> sigmoid channel gate."""

    def __init__(self, dim, rng, reduction=4):
        mid = max(dim // reduction, 1)
        self.down = Conv2d(dim, mid, 1, rng)
        self.down.bias.data[...] = 0.1  # start the bottleneck ReLUs active
        self.up = Conv2d(mid, dim, 1, rng)

    def forward(self, x):
        g = x.mean(axis=(2, 3), keepdims=True)
        g = sigmoid(self.up(relu(self.down(g))))
        return mul(x, g)


class RCAB(Module):
    """`layers` repetitions of conv-relu-conv-channel-attention + residual."""

    def __init__(self, dim, layers, rng):
        self.blocks = []
        for _ in range(layers):
            c1 = Conv2d(dim, dim, 3, rng)
            c1.bias.data[...] = 0.1  # keep the ReLU channels active at init
            self.blocks.append((c1, Conv2d(dim, dim, 3, rng),
                                ChannelAttention(dim, rng)))
        # register for named_parameters
        self.flat = [m for blk in self.blocks for m in blk]

    def forward(self, x):
        for c1, c2, ca in self.blocks:
            x = x + ca(c2(relu(c1(x))))
        return x


class HVITB(Module):
    """X = attn(LN(x), ctx) + alpha * RCAB(x);  out = MLP(LN(X)) + X."""

    def __init__(self, cfg: HVITBConfig, rng, cross=True):
        dim = cfg.embed_dim
        self.ln1 = LayerNorm(dim, axis=1)
        self.ln_ctx = LayerNorm(dim, axis=1) if cross else None
        self.attn = WindowAttention(dim, cfg.window_size, cfg.num_heads, rng,
                                    kv_windows=2 if cross else 1)
        self.rcab = RCAB(dim, cfg.rcab_layers, rng)
        self.alpha = Tensor(np.float32(cfg.alpha_init), requires_grad=True)
        self.ln2 = LayerNorm(dim, axis=1)
        self.mlp_in = Conv2d(dim, 2 * dim, 1, rng)
        self.mlp_out = Conv2d(2 * dim, dim, 1, rng)

    def forward(self, x_in, coarse_ctx=None):
        if coarse_ctx is not None:
            if self.ln_ctx is None:
                raise ShapeError("block built without cross-scale context support")
            ctx = self.ln_ctx(coarse_ctx)
        else:
            ctx = None
        a = self.attn(self.ln1(x_in), ctx)
        xmid = a + mul(self.alpha, self.rcab(x_in))
        return self.mlp_out(gelu(self.mlp_in(self.ln2(xmid)))) + xmid


class HVIT(Module):
    """L-level feature pyramid over the channel-concatenated input frames."""

    def __init__(self, in_channels, levels, cfg: HVITBConfig, rng):
        if levels < 1:
            raise ValueError("levels must be >= 1")
        dim = cfg.embed_dim
        self.levels = levels
        self.cfg = cfg
        self.proj = Conv2d(in_channels, dim, 3, rng)
        # downsample convs feed level s+1's features to level s (coarser)
        self.down = [Conv2d(dim, dim, 3, rng, stride=2) for _ in range(levels - 1)]
        self.blocks = [HVITB(cfg, rng, cross=(s > 0)) for s in range(levels)]
        self.res_convs = [Conv2d(dim, dim, 3, rng) for _ in range(levels)]

    def forward(self, frames):
        """frames: (1, C_in, H, W) with H, W divisible by 2^(L-1).

        Returns a FeaturePyramid, coarse (index 0) to fine (index L-1).
        """
        h, w = frames.shape[-2], frames.shape[-1]
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise ShapeError(
                f"input {h}x{w} must be divisible by 2^(L-1) = {div} for L={self.levels}")
        # fine-to-coarse: projection then strided downsampling chain
        xs = [self.proj(frames)]
        for dconv in self.down:
            xs.append(dconv(xs[-1]))
        xs = xs[::-1]                                  # coarse first
        # coarse-to-fine: attention blocks; finer levels attend into
        # the upsampled next-coarser output
        feats = []
        for s in range(self.levels):
            ctx = bilinear_resize(feats[-1], 2) if s > 0 else None
            out = self.res_convs[s](self.blocks[s](xs[s], ctx)) + xs[s]
            feats.append(out)
        return FeaturePyramid(feats)
