"""Differentiable layers with hand-written backward passes.

Each layer caches what its backward needs during ``forward`` and drops the
cache once ``backward`` has run, so a forward/backward pair is one episode.
``grad_check`` compares analytic gradients of any model exposing
``parameters()`` and ``loss_and_grad(x, target)`` with central differences.
"""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DataError, NumericError, ShapeError, StateError


class LayerKind(enum.Enum):
    CONV_TANH = "ConvTanh"
    CONV_LINEAR = "ConvLinear"
    MEAN_POOL2 = "MeanPool2"
    MAX_POOL2 = "MaxPool2"
    UPSAMPLE_NN2 = "UpsampleNN2"
    CONCAT_CHANNELS = "ConcatChannels"
    SOFTMAX_XENT = "SoftmaxXent"
    FLIP_H = "FlipH"


class Layer:
    kind: LayerKind
    n_inputs = 1

    def __init__(self):
        self._cache = None

    def parameters(self) -> list[np.ndarray]:
        return []

    def forward(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        if self.n_inputs is not None and len(inputs) != self.n_inputs:
            raise ShapeError(f"{self.kind.value} takes {self.n_inputs} input(s), got {len(inputs)}")
        out, self._cache = self._forward(list(inputs))
        return out

    def backward(self, grad_out: np.ndarray):
        """Return ``(grad_inputs, grad_params)``; grad_params is None for parameter-free layers."""
        if self._cache is None:
            raise StateError(f"{self.kind.value}.backward called before forward")
        cache, self._cache = self._cache, None
        return self._backward(cache, grad_out)

    def __call__(self, *inputs):
        return self.forward(inputs)


class Conv(Layer):
    """Same-padded convolution with per-channel bias, optionally followed by tanh."""

    def __init__(self, kernel: np.ndarray, bias: np.ndarray, activation: bool = True):
        super().__init__()
        tc.check_kernel(kernel, bias)
        self.kernel = kernel
        self.bias = bias
        self.activation = activation
        self.kind = LayerKind.CONV_TANH if activation else LayerKind.CONV_LINEAR

    def parameters(self):
        return [self.kernel, self.bias]

    def _forward(self, inputs):
        x = tc.as_tensor3(inputs[0])
        z = tc.conv2d_same(x, self.kernel, self.bias)
        if not self.activation:
            return z, (x, None)
        y = np.tanh(z)
        return y, (x, y)

    def _backward(self, cache, grad_out):
        x, y = cache
        g = grad_out * (1.0 - y * y) if self.activation else grad_out
        dx, dk, db = tc.conv2d_same_backward(x, self.kernel, g)
        return [dx], (dk, db)


def ConvTanh(kernel, bias) -> Conv:
    return Conv(kernel, bias, activation=True)


def ConvLinear(kernel, bias) -> Conv:
    return Conv(kernel, bias, activation=False)


class MeanPool2(Layer):
    kind = LayerKind.MEAN_POOL2

    def _forward(self, inputs):
        x = tc.as_tensor3(inputs[0])
        return tc.mean_pool2(x), x.shape

    def _backward(self, shape, grad_out):
        h, w, _ = shape
        if h % 2 or w % 2:
            dx = tc.upsample_nn2(grad_out / _window_counts(h, w))[:h, :w]
            return [np.ascontiguousarray(dx)], None
        return [tc.upsample_nn2(grad_out) / 4.0], None


def _window_counts(h: int, w: int) -> np.ndarray:
    rows = np.full((h + 1) // 2, 2.0)
    cols = np.full((w + 1) // 2, 2.0)
    if h % 2:
        rows[-1] = 1.0
    if w % 2:
        cols[-1] = 1.0
    return (rows[:, None] * cols[None, :])[:, :, None]


class MaxPool2(Layer):
    kind = LayerKind.MAX_POOL2

    def _forward(self, inputs):
        x = tc.as_tensor3(inputs[0])
        return tc.max_pool2(x), (x.shape, tc.max_pool2_argmax(x))

    def _backward(self, cache, grad_out):
        (h, w, c), arg = cache
        hp, wp = h + h % 2, w + w % 2
        # one-hot over the 4 window slots, then unfold back to pixel layout
        onehot = (arg[..., None] == np.arange(4)) * grad_out[..., None]
        blocks = onehot.reshape(hp // 2, wp // 2, c, 2, 2).transpose(0, 3, 1, 4, 2)
        dx = blocks.reshape(hp, wp, c)[:h, :w]
        return [np.ascontiguousarray(dx, dtype=tc.DTYPE)], None


class UpsampleNN2(Layer):
    kind = LayerKind.UPSAMPLE_NN2

    def _forward(self, inputs):
        x = tc.as_tensor3(inputs[0])
        return tc.upsample_nn2(x), True

    def _backward(self, cache, grad_out):
        h, w, c = grad_out.shape
        return [grad_out.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))], None


class ConcatChannels(Layer):
    kind = LayerKind.CONCAT_CHANNELS
    n_inputs = None

    def _forward(self, inputs):
        return tc.concat_channels(inputs), [tc.as_tensor3(x).shape[2] for x in inputs]

    def _backward(self, widths, grad_out):
        cuts = np.cumsum(widths)[:-1]
        return [np.ascontiguousarray(g) for g in np.split(grad_out, cuts, axis=2)], None


class FlipH(Layer):
    kind = LayerKind.FLIP_H

    def _forward(self, inputs):
        return tc.flip_horizontal(tc.as_tensor3(inputs[0])), True

    def _backward(self, cache, grad_out):
        return [tc.flip_horizontal(grad_out)], None


class SoftmaxXent(Layer):
    """Softmax over channels fused with mean per-pixel cross-entropy.

    ``forward`` returns probabilities and stores the scalar loss in ``loss``;
    ``backward`` takes the upstream scalar gradient (normally 1.0).
    """

    kind = LayerKind.SOFTMAX_XENT

    def __init__(self, target: np.ndarray | None = None):
        super().__init__()
        self.target = target
        self.loss = None

    def _forward(self, inputs):
        probs = tc.softmax_channels(inputs[0])
        if self.target is None:
            raise StateError("SoftmaxXent needs a target before forward")
        self.loss = cross_entropy(probs, self.target)
        return probs, probs

    def _backward(self, probs, grad_out=1.0):
        h, w, n = probs.shape
        g = probs.copy()
        rows, cols = np.indices((h, w))
        g[rows, cols, np.asarray(self.target)] -= 1.0
        return [g * (float(grad_out) / (h * w))], None


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> float:
    """Mean over pixels of -log p(true class), log argument clamped at 1e-12."""
    h, w, n = probs.shape
    target = np.asarray(target)
    if target.shape != (h, w):
        raise ShapeError(f"target shape {target.shape} does not match probabilities {(h, w)}")
    if target.min() < 0 or target.max() >= n:
        raise DataError(f"target class index out of range [0, {n})")
    rows, cols = np.indices((h, w))
    p = probs[rows, cols, target]
    return float(-np.log(np.maximum(p, 1e-12)).mean())


# ---------------------------------------------------------------------------
# composition


class Fork:
    """Run several chains on the same input and concatenate their outputs."""

    def __init__(self, branches: Sequence["Chain"]):
        self.branches = list(branches)
        self.concat = ConcatChannels()

    def parameters(self):
        return [p for b in self.branches for p in b.parameters()]

    def forward(self, x):
        return self.concat.forward([b.forward(x) for b in self.branches])

    def backward(self, grad_out):
        grads, _ = self.concat.backward(grad_out)
        dx = None
        dparams = []
        for b, g in zip(self.branches, grads):
            dxb, dpb = b.backward(g)
            dx = dxb if dx is None else dx + dxb
            dparams.extend(dpb)
        return dx, dparams


class Chain:
    """A sequence of single-input layers (or ``Fork`` blocks)."""

    def __init__(self, steps: Sequence):
        self.steps = list(steps)

    def parameters(self):
        return [p for s in self.steps for p in s.parameters()]

    def forward(self, x):
        for s in self.steps:
            x = s.forward(x) if isinstance(s, (Fork, Chain)) else s.forward([x])
        return x

    def backward(self, grad_out):
        dparams: list[np.ndarray] = []
        g = grad_out
        for s in reversed(self.steps):
            if isinstance(s, (Fork, Chain)):
                g, dp = s.backward(g)
                dparams = list(dp) + dparams
            else:
                grads, dp = s.backward(g)
                g = grads[0]
                if dp is not None:
                    dparams = list(dp) + dparams
        return g, dparams


class LossModel:
    """Wraps a chain with a fused softmax cross-entropy head."""

    def __init__(self, body: Chain):
        self.body = body

    def parameters(self):
        return self.body.parameters()

    def loss(self, x, target) -> float:
        head = SoftmaxXent(target)
        head.forward([self.body.forward(x)])
        self.body_reset()
        return head.loss

    def body_reset(self):
        for layer in _iter_layers(self.body):
            layer._cache = None

    def loss_and_grad(self, x, target):
        head = SoftmaxXent(target)
        head.forward([self.body.forward(x)])
        (g,), _ = head.backward(1.0)
        dx, dparams = self.body.backward(g)
        return head.loss, dx, dparams


def _iter_layers(node):
    if isinstance(node, Layer):
        yield node
    elif isinstance(node, Chain):
        for s in node.steps:
            yield from _iter_layers(s)
    elif isinstance(node, Fork):
        yield node.concat
        for b in node.branches:
            yield from _iter_layers(b)


# ---------------------------------------------------------------------------
# finite-difference verification


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)


def grad_check(
    model,
    x: np.ndarray,
    target: np.ndarray,
    epsilon: float = 1e-5,
    n_input_samples: int = 200,
    seed: int = 0,
    detail: bool = False,
):
    """Max relative error between analytic and central-difference gradients.

    Every parameter element is perturbed, plus ``n_input_samples`` input
    elements drawn without replacement (all of them if there are fewer).
    ``model`` must provide ``parameters()`` (arrays perturbed in place),
    ``loss(x, target)`` and ``loss_and_grad(x, target)``.
    With ``detail=True`` returns ``(max_error, {"params": e, "input": e})``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    x = np.array(x, dtype=tc.DTYPE)
    loss0, dx, dparams = model.loss_and_grad(x, target)
    if not np.isfinite(loss0):
        raise NumericError(f"non-finite loss {loss0} in gradient check")

    def fd(arr, flat_index):
        view = arr.reshape(-1)
        old = view[flat_index]
        view[flat_index] = old + epsilon
        lp = model.loss(x, target)
        view[flat_index] = old - epsilon
        lm = model.loss(x, target)
        view[flat_index] = old
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericError("non-finite loss under perturbation")
        return (lp - lm) / (2 * epsilon)

    param_err = 0.0
    for p, g in zip(model.parameters(), dparams):
        gflat = g.reshape(-1)
        for i in range(p.size):
            param_err = max(param_err, float(relative_error(gflat[i], fd(p, i))))

    rng = np.random.default_rng(seed)
    n = min(n_input_samples, x.size)
    picks = rng.choice(x.size, size=n, replace=False)
    dxflat = dx.reshape(-1)
    input_err = 0.0
    for i in picks:
        input_err = max(input_err, float(relative_error(dxflat[i], fd(x, int(i)))))

    worst = max(param_err, input_err)
    if detail:
        return worst, {"params": param_err, "input": input_err}
    return worst
