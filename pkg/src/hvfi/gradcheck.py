"""Finite-difference gradient checking in double precision.

The checker is the independent oracle for every backward rule: it compares
analytic gradients against central differences of the forward pass only.
Failures are reported, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, backward, mul, sum_


@dataclass
class GradCheckReport:
    max_rel_errors: list = field(default_factory=list)  # one per checked input
    tol: float = 1e-4

    @property
    def max_error(self):
        return max(self.max_rel_errors) if self.max_rel_errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tol

    def __str__(self):
        errs = ", ".join(f"{e:.3e}" for e in self.max_rel_errors)
        return f"gradcheck {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g}): [{errs}]"


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum.reduce([np.abs(a), np.abs(n), np.ones_like(a)])


def gradcheck(fn, inputs, tol=1e-4, eps=1e-4, step=None, rng=None, max_elems=None):
    """Check analytic grads of ``fn(*inputs)`` against central differences.

    inputs: list of Tensors (any dtype; copied to float64). fn may return a
    tensor of any shape; it is reduced to a scalar with a fixed random
    projection so all output elements influence the check.

    max_elems caps how many elements of each input are perturbed (evenly
    strided subsample) to bound runtime on composite blocks.
    """
    if step is not None:
        eps = step
    rng = rng or np.random.default_rng(0)

    xs = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64).copy(),
                 requires_grad=True) for t in inputs]

    def scalar_loss():
        out = fn(*xs)
        proj = getattr(scalar_loss, "proj", None)
        if proj is None or proj.shape != out.shape:
            proj = rng.standard_normal(out.shape)
            scalar_loss.proj = proj
        return sum_(mul(out, Tensor(proj, dtype=np.float64)))

    with Tape():
        loss = scalar_loss()
        backward(loss)
        analytic = [None if x.grad is None else x.grad.copy() for x in xs]

    def eval_loss():
        with Tape():
            return float(scalar_loss().data)

    report = GradCheckReport(tol=tol)
    for x, a in zip(xs, analytic):
        if a is None:
            a = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        n_el = flat.size
        if max_elems is not None and n_el > max_elems:
            sel = np.linspace(0, n_el - 1, max_elems).astype(int)
        else:
            sel = np.arange(n_el)
        worst = 0.0
        for i in sel:
            orig = flat[i]
            flat[i] = orig + eps
            fp = eval_loss()
            flat[i] = orig - eps
            fm = eval_loss()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, float(_rel_err(a.reshape(-1)[i], num)))
        report.max_rel_errors.append(worst)
    return report
