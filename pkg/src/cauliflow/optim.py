"""Adam optimizer and a finite-difference gradient checker."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


class Adam:
    """Standard Adam with bias correction, float64, deterministic.

    Parameters are an ordered list of Tensors; moment buffers follow that
    order, so two runs with identical gradients take identical steps.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("adam_step: non-finite gradient")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class GradCheckReport:
    """Outcome of comparing backward against central finite differences."""

    max_rel_err: float
    tolerance: float
    per_input: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance


def _compare_grads(fn, tensors, tolerance, h):
    out = fn(tensors)
    if out.shape != ():
        raise ValueError("grad_check: closure must return a scalar")
    for t in tensors:
        t.zero_grad()
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    # Central differences cannot resolve gradients below the round-off
    # level |f| * eps / h, so the relative-error denominator is floored
    # there; coordinates with near-zero true gradient would otherwise
    # report pure float64 cancellation noise as error.
    floor = max(1e-6, abs(float(out.data)) * 1e-14 / h)

    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance)
    for i, t in enumerate(tensors):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = fn(tensors).item()
                flat[j] = orig - h
                down = fn(tensors).item()
                flat[j] = orig
                num_flat[j] = (up - down) / (2.0 * h)
        denom = np.maximum(floor, np.abs(analytic[i]) + np.abs(numeric))
        rel = np.abs(analytic[i] - numeric) / denom
        worst = float(rel.max()) if rel.size else 0.0
        report.per_input.append({"input": i, "max_rel_err": worst})
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


def grad_check(fn, inputs, tolerance=1e-4, h=1e-5):
    """Compare analytic gradients of ``fn`` to central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor. Every coordinate of
    every input is perturbed by ±h. Relative error per coordinate is
    |analytic - numeric| / max(1e-6, |analytic| + |numeric|).
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64).copy(), requires_grad=True) for x in inputs]
    return _compare_grads(fn, tensors, tolerance, h)


def grad_check_params(loss_fn, params, tolerance=1e-4, h=1e-5):
    """grad_check against the live parameter tensors of a model.

    ``loss_fn`` takes no arguments and rebuilds the loss graph from the
    current parameter values; ``params`` is an iterable (or dict) of the
    model's parameter Tensors, perturbed in place.
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    return _compare_grads(lambda _ts: loss_fn(), tensors, tolerance, h)
