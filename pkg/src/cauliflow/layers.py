"""Small trainable layers on top of the autodiff tensor.

Bias addition is expressed as ``ones @ bias`` so the op set stays free of
row broadcasting; the extra rank-1 matmul is negligible at these sizes.
"""

import numpy as np

from .tensor import Tensor, conv1d, tanh


def _ones_column(n):
    return Tensor(np.ones((n, 1)))


class Linear:
    def __init__(self, gen, in_dim, out_dim, zero_init=False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = gen.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_dim)), requires_grad=True)

    def __call__(self, x):
        return x @ self.weight + _ones_column(x.shape[0]) @ self.bias

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Conv1d:
    """Same-padded dilated 1-D convolution layer over (P, C) sequences."""

    def __init__(self, gen, width, in_ch, out_ch, dilation=1, zero_init=False):
        if zero_init:
            w = np.zeros((width, in_ch, out_ch))
        else:
            w = gen.normal(0.0, 1.0 / np.sqrt(width * in_ch), (width, in_ch, out_ch))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_ch)), requires_grad=True)
        self.dilation = dilation

    def __call__(self, x):
        return conv1d(x, self.weight, self.dilation) + _ones_column(x.shape[0]) @ self.bias

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def collect_params(parts):
    """Merge [(prefix, layer-or-tensor)] into one ordered name->Tensor dict."""
    out = {}
    for prefix, part in parts:
        if isinstance(part, Tensor):
            out[prefix] = part
        else:
            out.update(part.params(prefix))
    return out


def load_params(params, arrays):
    """Copy checkpoint arrays into an existing name->Tensor dict, in place."""
    missing = [k for k in params if k not in arrays]
    extra = [k for k in arrays if k not in params]
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, tensor in params.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}")
        tensor.data = arr.astype(np.float64).copy()


def mask_rows(x, pad_mask):
    """Zero every row of (P, C) where pad_mask is True."""
    if not pad_mask.any():
        return x
    full = np.repeat(pad_mask[:, None], x.shape[1], axis=1)
    return x.masked_fill(full, 0.0)


def gated(x, channels):
    """Gated activation: tanh of first half times sigmoid of second half."""
    a = x[:, :channels]
    b = x[:, channels:]
    return tanh(a) * b.sigmoid()
