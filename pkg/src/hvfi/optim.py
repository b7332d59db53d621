"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
WEIGHT_DECAY = 1e-4


def cosine_lr(base_lr, step, total_steps):
    """base_lr * 0.5 * (1 + cos(pi * t / T)); base at t=0, zero at t=T."""
    t = min(step, total_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t / total_steps))


class AdamW:
    def __init__(self, named_params, lr=3e-4, betas=(BETA1, BETA2), eps=EPS,
                 weight_decay=WEIGHT_DECAY):
        self.named_params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr=None):
        """One update; lr overrides the stored rate (schedules pass it in)."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * update

    def state_arrays(self):
        """Flat (name, array) list for checkpointing, moments interleaved."""
        out = []
        for name, _ in self.named_params:
            out.append((f"{name}.m", self.m[name]))
            out.append((f"{name}.v", self.v[name]))
        return out

    def load_state_arrays(self, arrays, step_count):
        lookup = dict(arrays)
        for name, p in self.named_params:
            for store, key in ((self.m, f"{name}.m"), (self.v, f"{name}.v")):
                arr = lookup[key]
                if arr.shape != p.data.shape:
                    raise ValueError(
                        f"optimizer state {key} shape {arr.shape} != {p.data.shape}")
                store[name] = arr.astype(p.data.dtype)
        self.step_count = step_count
