"""Minimal layer abstractions on top of the autodiff ops.

A Module is just a parameter holder with a forward method; named_parameters
walks attributes in insertion order, so parameter ordering (and therefore
checkpoint layout) is deterministic.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, conv2d, layer_norm, linear


class Module:
    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr):
    return Tensor(arr.astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=True, gain=1.0):
        if padding is None:
            padding = k // 2
        bound = gain * np.sqrt(1.0 / (cin * k * k))
        self.weight = _param(rng.uniform(-bound, bound, (cout, cin, k, k)))
        self.bias = _param(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def zero_(self):
        """Zero all weights (used in tests and for zero-init output heads)."""
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0
        return self


class Linear(Module):
    def __init__(self, fin, fout, rng, bias=True, gain=1.0):
        bound = gain * np.sqrt(1.0 / fin)
        self.weight = _param(rng.uniform(-bound, bound, (fout, fin)))
        self.bias = _param(np.zeros(fout)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, axis=-1, eps=1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self.axis = axis
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps, self.axis)
