"""Dense numeric kernels on (H, W, C) float64 arrays.

Feature maps are ``ndarray`` of shape ``(H, W, C)``; convolution kernels are
``(kh, kw, C_in, C_out)``; biases are ``(C_out,)``.  Every function returns a
new array and never writes into its inputs.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError

DTYPE = np.float64


def as_tensor3(x, name: str = "input") -> np.ndarray:
    """Coerce ``x`` to a float64 (H, W, C) array, promoting 2-D input to C=1."""
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"{name}: expected (H, W, C) array, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ShapeError(f"{name}: empty dimension in shape {a.shape}")
    return a


def check_kernel(kernel: np.ndarray, bias: np.ndarray | None = None) -> None:
    if kernel.ndim != 4:
        raise ConfigError(f"kernel must be (kh, kw, in, out), got shape {kernel.shape}")
    kh, kw = kernel.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ConfigError(
            f"bias length {bias.shape} does not match out_channels {kernel.shape[3]}"
        )


def conv2d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with centered zero padding, plus per-channel bias.

    Accumulates one (H*W, C) @ (C, Q) product per kernel offset, which beats
    an explicit im2col matrix at the sizes used here.
    """
    x = as_tensor3(x)
    kernel = np.asarray(kernel, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    check_kernel(kernel, bias)
    kh, kw, cin, q = kernel.shape
    if cin != x.shape[2]:
        raise ConfigError(f"kernel expects {cin} input channels, input has {x.shape[2]}")
    h, w = x.shape[:2]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    out = np.empty((h * w, q))
    out[:] = bias
    for u in range(kh):
        for v in range(kw):
            out += padded[u:u + h, v:v + w].reshape(h * w, cin) @ kernel[u, v]
    return out.reshape(h, w, q)


def conv2d_same_backward(
    x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_input, d_kernel, d_bias) of ``conv2d_same`` given d_output."""
    kh, kw, cin, q = kernel.shape
    h, w = x.shape[:2]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    g = grad_out.reshape(h * w, q)
    d_padded = np.zeros_like(padded)
    d_kernel = np.empty_like(kernel)
    for u in range(kh):
        for v in range(kw):
            d_kernel[u, v] = padded[u:u + h, v:v + w].reshape(h * w, cin).T @ g
            d_padded[u:u + h, v:v + w] += (g @ kernel[u, v].T).reshape(h, w, cin)
    d_x = d_padded[ph:ph + h, pw:pw + w].copy()
    return d_x, d_kernel, g.sum(axis=0)


def conv2d_same_naive(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct five-loop evaluation of the same-padded convolution (reference)."""
    x = np.asarray(x, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    h, w, c = x.shape
    kh, kw, _, q = kernel.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, w, q))
    for i in range(h):
        for j in range(w):
            for oq in range(q):
                s = float(bias[oq])
                for u in range(kh):
                    ii = i + u - ph
                    if ii < 0 or ii >= h:
                        continue
                    for v in range(kw):
                        jj = j + v - pw
                        if jj < 0 or jj >= w:
                            continue
                        for k in range(c):
                            s += kernel[u, v, k, oq] * x[ii, jj, k]
                out[i, j, oq] = s
    return out


def tanh_map(x: np.ndarray) -> np.ndarray:
    return np.tanh(as_tensor3(x))


def _pad_even(x: np.ndarray, fill: float) -> tuple[np.ndarray, np.ndarray]:
    """Pad odd trailing row/col with ``fill``; also return a presence mask."""
    h, w, _ = x.shape
    ph, pw = h % 2, w % 2
    mask = np.ones((h, w, 1), dtype=bool)
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), constant_values=fill)
        mask = np.pad(mask, ((0, ph), (0, pw), (0, 0)), constant_values=False)
    return x, mask


def _blocks(x: np.ndarray) -> np.ndarray:
    """View (H, W, C) with even H, W as (H/2, W/2, C, 4) in row-major window order."""
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, c, 4)


def mean_pool2(x: np.ndarray) -> np.ndarray:
    x = as_tensor3(x)
    if x.shape[0] % 2 == 0 and x.shape[1] % 2 == 0:
        return _blocks(x).mean(axis=3)
    padded, mask = _pad_even(x, 0.0)
    total = _blocks(padded).sum(axis=3)
    count = _blocks(mask.astype(DTYPE)).sum(axis=3)
    return total / count


def max_pool2(x: np.ndarray) -> np.ndarray:
    x = as_tensor3(x)
    padded, _ = _pad_even(x, -np.inf)
    return _blocks(padded).max(axis=3)


def max_pool2_argmax(x: np.ndarray) -> np.ndarray:
    """Index 0..3 of the winning element per window; ties go to the first in row-major order."""
    padded, _ = _pad_even(as_tensor3(x), -np.inf)
    return _blocks(padded).argmax(axis=3)


def upsample_nn2(x: np.ndarray) -> np.ndarray:
    x = as_tensor3(x)
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    parts = [as_tensor3(p) for p in parts]
    hw = parts[0].shape[:2]
    for p in parts[1:]:
        if p.shape[:2] != hw:
            raise ShapeError(f"spatial mismatch in concat: {hw} vs {p.shape[:2]}")
    if len(parts) == 1:
        return parts[0].copy()
    return np.concatenate(parts, axis=2)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    x = as_tensor3(x)
    if x.shape[2] < 2:
        raise ShapeError("softmax needs at least 2 channels")
    z = x - x.max(axis=2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=2, keepdims=True)


def flip_horizontal(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x[:, ::-1].copy()
