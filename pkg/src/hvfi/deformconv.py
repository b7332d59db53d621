"""Modulated, separable deformable convolution.

For every output pixel the operator gathers n*n correspondences at fractional
positions (base tap grid + learned offsets), weights each sample by the outer
product of two 1-D kernels and by a sigmoid-bounded modulation mask, then
sums. A brute-force per-pixel/per-tap loop oracle verifies the vectorized
implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ShapeError, Tensor, as_tensor, bilinear_sample, mul,
                       reshape, sum_)


def base_grid(n):
    """Integer tap positions of a centered n x n window, row-major.

    Returns (dy, dx) int arrays of length n*n; tap i = iy*n + ix matches the
    separable-kernel flattening (vertical index iy, horizontal index ix).
    """
    if n % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {n}")
    r = n // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return dy.reshape(-1), dx.reshape(-1)


@dataclass
class DeformableKernel:
    """Per-frame deformable kernel field over an h x w grid.

    x_offsets/y_offsets/mask: (n*n, h, w); kernel_v/kernel_h: (n, h, w).
    Offsets are in pixels at the kernel's own scale and unbounded; masks are
    expected in [0, 1] (sigmoid-produced upstream).
    """

    x_offsets: Tensor
    y_offsets: Tensor
    kernel_v: Tensor
    kernel_h: Tensor
    mask: Tensor
    n: int

    def __post_init__(self):
        n2 = self.n * self.n
        h, w = self.x_offsets.shape[-2:]
        for name, t, ch in (("x_offsets", self.x_offsets, n2),
                            ("y_offsets", self.y_offsets, n2),
                            ("kernel_v", self.kernel_v, self.n),
                            ("kernel_h", self.kernel_h, self.n),
                            ("mask", self.mask, n2)):
            if t.shape != (ch, h, w):
                raise ShapeError(f"{name} shape {t.shape}, expected {(ch, h, w)}")

    @property
    def spatial(self):
        return self.x_offsets.shape[-2:]

    @classmethod
    def zeros(cls, n, h, w, dtype=np.float32):
        z2 = lambda: Tensor(np.zeros((n * n, h, w), dtype=dtype))
        z1 = lambda: Tensor(np.zeros((n, h, w), dtype=dtype))
        return cls(z2(), z2(), z1(), z1(), z2(), n)

    @classmethod
    def identity(cls, n, h, w, dtype=np.float64):
        """Zero offsets, delta kernel at the center tap, unit mask."""
        dek = cls.zeros(n, h, w, dtype=dtype)
        kv = np.zeros((n, h, w), dtype=dtype)
        kh = np.zeros((n, h, w), dtype=dtype)
        kv[n // 2] = 1.0
        kh[n // 2] = 1.0
        return cls(dek.x_offsets, dek.y_offsets, Tensor(kv), Tensor(kh),
                   Tensor(np.ones((n * n, h, w), dtype=dtype)), n)


def make_separable_kernel(kernel_v, kernel_h):
    """Densify two 1-D kernels into n*n taps via outer product.

    kernel_v/kernel_h: (n, h, w) -> (n*n, h, w), tap (i, j) -> i*n + j.
    """
    kv, kh = as_tensor(kernel_v), as_tensor(kernel_h)
    if kv.shape != kh.shape:
        raise ShapeError(f"kernel_v {kv.shape} != kernel_h {kh.shape}")
    n, h, w = kv.shape
    dense = mul(reshape(kv, (n, 1, h, w)), reshape(kh, (1, n, h, w)))
    return reshape(dense, (n * n, h, w))


def deform_conv(frame, dek: DeformableKernel):
    """Apply a deformable kernel field to a (1, c, h, w) frame.

    out(x, y) = sum_i k_i(x,y) * m_i(x,y) * frame[y + p_i.y + dy_i, x + p_i.x + dx_i]
    with bilinear interpolation at fractional positions and zero contribution
    outside the image. Differentiable w.r.t. the frame and all kernel fields.
    """
    frame = as_tensor(frame)
    if frame.ndim != 4 or frame.shape[0] != 1:
        raise ShapeError(f"frame must be (1, c, h, w), got {frame.shape}")
    h, w = frame.shape[2], frame.shape[3]
    if dek.spatial != (h, w):
        raise ShapeError(f"frame spatial {(h, w)} != kernel spatial {dek.spatial}")

    n = dek.n
    dy, dx = base_grid(n)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_x = (xx[None] + dx[:, None, None]).astype(frame.dtype)  # (n2, h, w)
    base_y = (yy[None] + dy[:, None, None]).astype(frame.dtype)

    cx = dek.x_offsets + base_x
    cy = dek.y_offsets + base_y
    samples = bilinear_sample(frame, cx, cy)           # (1, c, n2, h, w)
    taps = make_separable_kernel(dek.kernel_v, dek.kernel_h)
    weights = mul(taps, dek.mask)                      # (n2, h, w), broadcasts below
    return sum_(mul(samples, weights), axis=2)         # (1, c, h, w)


def _bilinear_scalar(img, y, x):
    """Zero-padded bilinear interpolation of one channel at one point."""
    h, w = img.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    val = 0.0
    for ddy, ddx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                         (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yi, xi = y0 + ddy, x0 + ddx
        if 0 <= yi < h and 0 <= xi < w:
            val += wt * img[yi, xi]
    return val


def oracle_deform_conv(frame, dek: DeformableKernel):
    """Forward-only brute-force reference: explicit per-pixel per-tap loops."""
    fd = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if fd.ndim != 4 or fd.shape[0] != 1:
        raise ShapeError(f"frame must be (1, c, h, w), got {fd.shape}")
    _, c, h, w = fd.shape
    if dek.spatial != (h, w):
        raise ShapeError(f"frame spatial {(h, w)} != kernel spatial {dek.spatial}")
    n = dek.n
    dy, dx = base_grid(n)
    xo, yo = dek.x_offsets.data, dek.y_offsets.data
    kv, kh, m = dek.kernel_v.data, dek.kernel_h.data, dek.mask.data

    out = np.zeros_like(fd, dtype=np.float64)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for i in range(n * n):
                    k_i = kv[i // n, y, x] * kh[i % n, y, x]
                    if k_i == 0.0 and m[i, y, x] == 0.0:
                        continue
                    sy = y + dy[i] + yo[i, y, x]
                    sx = x + dx[i] + xo[i, y, x]
                    acc += k_i * m[i, y, x] * _bilinear_scalar(fd[0, ch], sy, sx)
                out[0, ch, y, x] = acc
    return Tensor(out.astype(fd.dtype))
