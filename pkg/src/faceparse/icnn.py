"""Interlinked multi-column CNN.

Column k (0-based) sees the input at scale 1/2**k.  Each interlinking round
concatenates, per column, the max-pooled maps of the finer neighbour, the
column's own maps and the upsampled maps of the coarser neighbour (in that
order) and applies one tanh convolution.  Afterwards the columns are merged
coarse-to-fine into column 0, which ends in a linear convolution with one
map per label followed by a softmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ShapeError
from .layers import (
    ConcatChannels,
    Conv,
    MaxPool2,
    MeanPool2,
    SoftmaxXent,
    UpsampleNN2,
)


@dataclass(frozen=True)
class ICNNConfig:
    num_labels: int
    num_columns: int = 4
    interlink_rounds: int = 3
    maps_per_column: tuple[int, ...] = (8, 8, 8, 8)
    kernel_size: int = 5
    final_kernel_size: int = 9
    input_channels: int = 3
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "maps_per_column", tuple(int(m) for m in self.maps_per_column))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.num_columns < 2:
            raise ConfigError("num_columns must be >= 2")
        if self.num_labels < 2:
            raise ConfigError("num_labels must be >= 2")
        if self.interlink_rounds < 1:
            raise ConfigError("interlink_rounds must be >= 1")
        if len(self.maps_per_column) != self.num_columns:
            raise ConfigError(
                f"maps_per_column has {len(self.maps_per_column)} entries, expected {self.num_columns}"
            )
        if min(self.maps_per_column) < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")
        for name in ("kernel_size", "final_kernel_size"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd number, got {k}")
        step = 2 ** (self.num_columns - 1)
        h, w = self.input_size
        if h < step or w < step or h % step or w % step:
            raise ConfigError(f"input size {h}x{w} must be divisible by {step}")

    @classmethod
    def uniform(cls, num_labels: int, maps: int = 8, num_columns: int = 4, **kw) -> "ICNNConfig":
        return cls(num_labels=num_labels, num_columns=num_columns,
                   maps_per_column=(maps,) * num_columns, **kw)

    def round_in_channels(self, column: int, round_index: int) -> int:
        prev = [self.input_channels] * self.num_columns if round_index == 0 else self.maps_per_column
        total = prev[column]
        if column > 0:
            total += prev[column - 1]
        if column < self.num_columns - 1:
            total += prev[column + 1]
        return total

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        """Kernel shapes in canonical order: columns x rounds, integration, final."""
        k = self.kernel_size
        shapes = []
        for col in range(self.num_columns):
            for r in range(self.interlink_rounds):
                shapes.append((k, k, self.round_in_channels(col, r), self.maps_per_column[col]))
        for target in range(self.num_columns - 2, -1, -1):
            cin = self.maps_per_column[target] + self.maps_per_column[target + 1]
            shapes.append((k, k, cin, self.maps_per_column[target]))
        f = self.final_kernel_size
        shapes.append((f, f, self.maps_per_column[0], self.num_labels))
        return shapes


@dataclass
class ICNNParams:
    """All (kernel, bias) pairs of one network.

    ``columns[c][r]`` feeds column ``c`` in round ``r``; ``integration[i]``
    merges column ``K-1-i`` into column ``K-2-i``; ``final`` is the linear head.
    """

    columns: list[list[tuple[np.ndarray, np.ndarray]]]
    integration: list[tuple[np.ndarray, np.ndarray]]
    final: tuple[np.ndarray, np.ndarray]

    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = [p for col in self.columns for p in col]
        out.extend(self.integration)
        out.append(self.final)
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in self.pairs() for a in pair]

    def copy(self) -> "ICNNParams":
        return ICNNParams.from_pairs(
            [(k.copy(), b.copy()) for k, b in self.pairs()], len(self.columns)
        )

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[np.ndarray, np.ndarray]], num_columns: int) -> "ICNNParams":
        pairs = list(pairs)
        n_int = num_columns - 1
        body = pairs[: len(pairs) - n_int - 1]
        if len(body) % num_columns:
            raise ConfigError("parameter count does not factor into columns x rounds")
        rounds = len(body) // num_columns
        columns = [body[c * rounds:(c + 1) * rounds] for c in range(num_columns)]
        return cls(columns, pairs[len(body):-1], pairs[-1])

    def check(self, config: ICNNConfig) -> None:
        got = [k.shape for k, _ in self.pairs()]
        want = config.layer_shapes()
        if got != want:
            raise ConfigError(f"parameter shapes {got} do not match config {want}")
        for k, b in self.pairs():
            if b.shape != (k.shape[3],):
                raise ConfigError("bias length does not match kernel out_channels")


def init_params(config: ICNNConfig, seed: int) -> ICNNParams:
    """Glorot-uniform kernels, zero biases, drawn in canonical layer order."""
    rng = np.random.default_rng(seed)
    pairs = []
    for shape in config.layer_shapes():
        kh, kw, cin, cout = shape
        s = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
        pairs.append((rng.uniform(-s, s, size=shape), np.zeros(cout)))
    return ICNNParams.from_pairs(pairs, config.num_columns)


def build_pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    image = tc.as_tensor3(image)
    step = 2 ** (levels - 1)
    h, w = image.shape[:2]
    if h % step or w % step:
        raise ShapeError(f"{h}x{w} input is not divisible by {step} for a {levels}-level pyramid")
    out = [image]
    for _ in range(levels - 1):
        out.append(tc.mean_pool2(out[-1]))
    return out


def _check_scale_chain(features: Sequence[np.ndarray]) -> None:
    for k in range(1, len(features)):
        h, w = features[k - 1].shape[:2]
        if features[k].shape[:2] != (h // 2, w // 2) or h % 2 or w % 2:
            raise ShapeError(
                f"column {k} has spatial size {features[k].shape[:2]}, expected half of {(h, w)}"
            )


class _Interlink:
    """One interlinking round over all columns, with its backward."""

    def __init__(self, pairs: Sequence[tuple[np.ndarray, np.ndarray]]):
        self.convs = [Conv(k, b) for k, b in pairs]
        K = len(pairs)
        self.down = [MaxPool2() if c > 0 else None for c in range(K)]
        self.up = [UpsampleNN2() if c < K - 1 else None for c in range(K)]
        self.concat = [ConcatChannels() for _ in range(K)]

    def forward(self, features):
        _check_scale_chain(features)
        K = len(features)
        out = []
        for c in range(K):
            parts = []
            if c > 0:
                parts.append(self.down[c].forward([features[c - 1]]))
            parts.append(features[c])
            if c < K - 1:
                parts.append(self.up[c].forward([features[c + 1]]))
            out.append(self.convs[c].forward([self.concat[c].forward(parts)]))
        return out

    def backward(self, grads):
        K = len(grads)
        d_feat = [None] * K
        d_params = []

        def add(i, g):
            d_feat[i] = g if d_feat[i] is None else d_feat[i] + g

        for c in range(K):
            (d_cat,), dp = self.convs[c].backward(grads[c])
            d_params.append(dp)
            pieces, _ = self.concat[c].backward(d_cat)
            i = 0
            if c > 0:
                (g,), _ = self.down[c].backward(pieces[i])
                add(c - 1, g)
                i += 1
            add(c, pieces[i])
            i += 1
            if c < K - 1:
                (g,), _ = self.up[c].backward(pieces[i])
                add(c + 1, g)
        return d_feat, d_params


class _Integrate:
    """Coarse-to-fine merge of all columns into column 0."""

    def __init__(self, pairs):
        self.convs = [Conv(k, b) for k, b in pairs]
        self.up = [UpsampleNN2() for _ in pairs]
        self.concat = [ConcatChannels() for _ in pairs]

    def forward(self, features):
        K = len(features)
        merged = features[K - 1]
        for i, target in enumerate(range(K - 2, -1, -1)):
            up = self.up[i].forward([merged])
            if up.shape[:2] != features[target].shape[:2]:
                raise ShapeError(
                    f"cannot merge {merged.shape[:2]} into column {target} of size {features[target].shape[:2]}"
                )
            merged = self.convs[i].forward([self.concat[i].forward([features[target], up])])
        return merged

    def backward(self, grad):
        K = len(self.convs) + 1
        d_feat = [None] * K
        d_params = [None] * (K - 1)
        g = grad
        for i in range(K - 2, -1, -1):
            target = K - 2 - i
            (d_cat,), d_params[i] = self.convs[i].backward(g)
            (d_own, d_up), _ = self.concat[i].backward(d_cat)
            d_feat[target] = d_own
            (g,), _ = self.up[i].backward(d_up)
        d_feat[K - 1] = g
        return d_feat, d_params


def interlink_round(features, pairs):
    """Functional form of one interlinking round (no gradient bookkeeping)."""
    return _Interlink(pairs).forward([tc.as_tensor3(f) for f in features])


def integrate_outputs(features, pairs):
    return _Integrate(pairs).forward([tc.as_tensor3(f) for f in features])


class ICNN:
    """A configured network bound to its parameters.

    The layer objects hold references to the parameter arrays, so in-place
    updates of ``params`` are seen by the next forward.  One instance runs one
    forward/backward episode at a time.
    """

    def __init__(self, config: ICNNConfig, params: ICNNParams):
        params.check(config)
        self.config = config
        self.params = params
        self._pyramid = [MeanPool2() for _ in range(config.num_columns - 1)]
        self._rounds = [
            _Interlink([params.columns[c][r] for c in range(config.num_columns)])
            for r in range(config.interlink_rounds)
        ]
        self._integrate = _Integrate(params.integration)
        self._final = Conv(*params.final, activation=False)

    def parameters(self) -> list[np.ndarray]:
        return self.params.arrays()

    def _check_input(self, image):
        image = tc.as_tensor3(image, "image")
        want = (*self.config.input_size, self.config.input_channels)
        if image.shape != want:
            raise ShapeError(f"image shape {image.shape} does not match network input {want}")
        return image

    def logits(self, image: np.ndarray) -> np.ndarray:
        """Pre-softmax maps of the final linear convolution, (H, W, L)."""
        feats = [self._check_input(image)]
        for pool in self._pyramid:
            feats.append(pool.forward([feats[-1]]))
        for rnd in self._rounds:
            feats = rnd.forward(feats)
        return self._final.forward([self._integrate.forward(feats)])

    def forward(self, image: np.ndarray) -> np.ndarray:
        probs = tc.softmax_channels(self.logits(image))
        self.clear()
        return probs

    def backward_logits(self, d_logits: np.ndarray):
        """Backpropagate a gradient on the logits; returns (d_image, d_params list)."""
        (d_final_in,), dp_final = self._final.backward(d_logits)
        d_feats, dp_int = self._integrate.backward(d_final_in)
        dp_rounds = []
        for rnd in reversed(self._rounds):
            d_feats, dp = rnd.backward(d_feats)
            dp_rounds.insert(0, dp)
        g = d_feats[-1]
        for i in range(len(self._pyramid) - 1, -1, -1):
            (g,), _ = self._pyramid[i].backward(g)
            g = g + d_feats[i]
        K = self.config.num_columns
        grads = []
        for c in range(K):
            for r in range(self.config.interlink_rounds):
                grads.extend(dp_rounds[r][c])
        for dp in dp_int:
            grads.extend(dp)
        grads.extend(dp_final)
        return g, grads

    def loss_and_grad(self, image, target):
        head = SoftmaxXent(target)
        head.forward([self.logits(image)])
        (d_logits,), _ = head.backward(1.0)
        d_image, grads = self.backward_logits(d_logits)
        return head.loss, d_image, grads

    def loss(self, image, target) -> float:
        head = SoftmaxXent(target)
        head.forward([self.logits(image)])
        self.clear()
        return head.loss

    def clear(self) -> None:
        """Drop cached activations from an abandoned episode."""
        layers = list(self._pyramid) + [self._final]
        for rnd in self._rounds:
            layers += rnd.convs + rnd.concat + [l for l in rnd.down + rnd.up if l is not None]
        layers += self._integrate.convs + self._integrate.up + self._integrate.concat
        for layer in layers:
            layer._cache = None


def icnn_forward(config: ICNNConfig, params: ICNNParams, image: np.ndarray) -> np.ndarray:
    return ICNN(config, params).forward(image)
