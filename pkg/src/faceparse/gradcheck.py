"""Finite-difference checks for every layer kind and a width-reduced iCNN."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .errors import ConfigError
from .icnn import ICNN, ICNNConfig, init_params

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CaseResult:
    name: str
    max_rel_error: float
    param_error: float
    input_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _glorot(rng, kh, kw, cin, cout):
    limit = np.sqrt(6.0 / (kh * kw * (cin + cout)))
    return rng.uniform(-limit, limit, (kh, kw, cin, cout)), rng.uniform(-0.1, 0.1, cout)


def _conv(rng, k, cin, cout, activation=True):
    return L.Conv(*_glorot(rng, k, k, cin, cout), activation=activation)


def _layer_cases(rng) -> dict[str, tuple[L.LossModel, np.ndarray, np.ndarray]]:
    """One small model per layer kind; each ends in a linear conv so the loss sees every channel."""
    h, w, c, n = 6, 7, 2, 3
    x = rng.normal(size=(h, w, c))
    t = rng.integers(0, n, (h, w))
    t_half = rng.integers(0, n, ((h + 1) // 2, (w + 1) // 2))
    t_even = rng.integers(0, n, (4, 6))
    return {
        "ConvTanh": (L.LossModel(L.Chain([_conv(rng, 3, c, 4), _conv(rng, 1, 4, n, False)])), x, t),
        "ConvLinear": (L.LossModel(L.Chain([_conv(rng, 5, c, n, False)])), x, t),
        # odd sizes exercise the partial border windows
        "MeanPool2": (L.LossModel(L.Chain([L.MeanPool2(), _conv(rng, 3, c, n, False)])), x, t_half),
        "MaxPool2": (L.LossModel(L.Chain([L.MaxPool2(), _conv(rng, 3, c, n, False)])), x, t_half),
        "UpsampleNN2": (
            L.LossModel(L.Chain([L.UpsampleNN2(), _conv(rng, 3, c, n, False)])),
            rng.normal(size=(2, 3, c)), t_even,
        ),
        "ConcatChannels": (
            L.LossModel(L.Chain([
                L.Fork([L.Chain([_conv(rng, 3, c, 2)]), L.Chain([_conv(rng, 1, c, 3)])]),
                _conv(rng, 3, 5, n, False),
            ])), x, t,
        ),
        "SoftmaxXent": (L.LossModel(L.Chain([])), rng.normal(size=(h, w, n)), t),
        "FlipH": (L.LossModel(L.Chain([_conv(rng, 3, c, 3), L.FlipH(), _conv(rng, 3, 3, n, False)])), x, t),
    }


def reduced_icnn(seed: int = 0) -> tuple[ICNN, np.ndarray, np.ndarray]:
    """maps_per_column=2 on a 16x16 input with three labels."""
    config = ICNNConfig.uniform(3, maps=2, input_size=(16, 16))
    rng = np.random.default_rng(seed)
    net = ICNN(config, init_params(config, seed))
    # nonzero biases so no gradient is trivially zero
    for _, b in net.params.pairs():
        b[...] = rng.uniform(-0.1, 0.1, b.shape)
    return net, rng.normal(size=(16, 16, 3)), rng.integers(0, 3, (16, 16))


def run_all(seed: int = 0, epsilon: float = 1e-5, n_input_samples: int = 200,
            on_case: Callable[[CaseResult], None] | None = None) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    cases = _layer_cases(rng)
    results = []

    def check(name, model, x, t):
        t0 = time.perf_counter()
        worst, parts = L.grad_check(model, x, t, epsilon=epsilon, n_input_samples=n_input_samples,
                                    seed=seed, detail=True)
        res = CaseResult(name, worst, parts["params"], parts["input"], time.perf_counter() - t0)
        results.append(res)
        if on_case:
            on_case(res)

    for name, (model, x, t) in cases.items():
        check(name, model, x, t)
    check("iCNN(reduced)", *reduced_icnn(seed))
    return results


_CORRUPTIBLE = {
    "ConvTanh": L.Conv, "ConvLinear": L.Conv, "MeanPool2": L.MeanPool2, "MaxPool2": L.MaxPool2,
    "UpsampleNN2": L.UpsampleNN2, "ConcatChannels": L.ConcatChannels,
    "SoftmaxXent": L.SoftmaxXent, "FlipH": L.FlipH,
}


@contextlib.contextmanager
def corrupted_backward(kind: str, factor: float = 1.01):
    """Test hook: scale the input gradient of one layer class by ``factor``."""
    if kind not in _CORRUPTIBLE:
        raise ConfigError(f"corrupt: expected one of {sorted(_CORRUPTIBLE)}, got {kind!r}")
    cls = _CORRUPTIBLE[kind]
    original = cls._backward

    def bad(self, cache, grad_out):
        grads, dp = original(self, cache, grad_out)
        return [g * factor for g in grads], dp

    cls._backward = bad
    try:
        yield
    finally:
        cls._backward = original


def format_results(results: list[CaseResult]) -> str:
    lines = [f"{'case':<16} {'max rel err':>12} {'params':>10} {'input':>10}  status"]
    for r in results:
        lines.append(f"{r.name:<16} {r.max_rel_error:>12.3e} {r.param_error:>10.2e} "
                     f"{r.input_error:>10.2e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
