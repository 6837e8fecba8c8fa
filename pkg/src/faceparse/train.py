"""SGD training, augmentation, input normalisation and checkpoints.

Checkpoint layout (little-endian)::

    b"ICNNCKPT" u16 version
    config:  u32 num_columns, u32 num_labels, u32 interlink_rounds,
             u32 n, u32 maps_per_column[n], u32 kernel_size, u32 final_kernel_size,
             u32 input_channels, u32 input_height, u32 input_width
    meta:    u32 nbytes, UTF-8 JSON object
    params:  u32 nblocks, then per block u32 dims[4] and f32 values
             (kernel then bias for every layer in canonical order;
              a bias of length Q is stored with dims (Q, 1, 1, 1))
    u32 crc32 of everything before it
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import layers
from .data_io import FileFormatError, Reader, _read_bytes, atomic_write, with_crc
from .errors import ConfigError, NumericError
from .icnn import ICNN, ICNNConfig, ICNNParams

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ICNNCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 1
    max_epochs: int = 20
    seed: int = 0
    augment: bool = True
    eval_every: int = 1
    lr_decay: float = 1.0
    patience: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError("max_epochs, eval_every and patience must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")


@dataclass(frozen=True)
class AugmentSpec:
    max_rotation: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_shift: float = 10.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= 1.0 <= hi):
            raise ConfigError(f"scale_range {self.scale_range} must contain 1.0")
        if self.max_rotation < 0 or self.max_shift < 0:
            raise ConfigError("max_rotation and max_shift must be >= 0")


def cross_entropy_loss(probs: np.ndarray, target: np.ndarray) -> float:
    return layers.cross_entropy(probs, target)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Subtract the scalar mean, then divide by the RMS of the centred values.

    Sums are exactly rounded (``math.fsum``) so the result does not depend on
    pixel order; a mirrored image normalises to the mirrored result bit for bit.
    """
    x = np.asarray(image, dtype=np.float64)
    x = x - math.fsum(x.ravel()) / x.size
    rms = math.sqrt(math.fsum((x * x).ravel()) / x.size)
    return x / rms if rms >= 1e-8 else x


# ---------------------------------------------------------------------------
# augmentation


def draw_transform(spec: AugmentSpec, rng: np.random.Generator) -> tuple[float, float, tuple[float, float]]:
    theta = rng.uniform(-spec.max_rotation, spec.max_rotation)
    scale = rng.uniform(*spec.scale_range)
    shift = tuple(rng.uniform(-spec.max_shift, spec.max_shift, 2))
    return theta, scale, shift


def similarity_matrix(theta_deg: float, scale: float) -> np.ndarray:
    """Forward map on (row, col) offsets from the image centre."""
    t = np.radians(theta_deg)
    return scale * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def warp(image, labels, theta_deg: float, scale: float, shift) -> tuple[np.ndarray, np.ndarray]:
    """Rotate and scale about the centre, then shift; bilinear image, nearest labels.

    Pixels pulled from outside the frame take the per-channel image mean and
    label 0.
    """
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if theta_deg == 0 and scale == 1 and shift[0] == 0 and shift[1] == 0:
        return image.copy(), labels.copy()
    h, w = labels.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(similarity_matrix(theta_deg, scale))
    offset = center - inv @ (center + np.asarray(shift, dtype=float))
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[:, :, ch] = ndimage.affine_transform(
            image[:, :, ch], inv, offset, order=1, mode="constant", cval=float(image[:, :, ch].mean())
        )
    lab = ndimage.affine_transform(labels, inv, offset, order=0, mode="constant", cval=0)
    return out, lab.astype(labels.dtype)


def augment(image, labels, spec: AugmentSpec, rng: np.random.Generator):
    if np.shape(image)[:2] != np.shape(labels):
        raise ConfigError("image and labels must share spatial dims")
    return warp(image, labels, *draw_transform(spec, rng))


# ---------------------------------------------------------------------------
# SGD


def sgd_epoch(
    net: ICNN,
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    spec: AugmentSpec | None,
    epoch: int = 0,
    learning_rate: float | None = None,
) -> tuple[ICNNParams, float]:
    """One pass over a seeded permutation; updates ``net.params`` in place.

    Inputs are augmented (when enabled) and normalised on the fly.  Gradients
    are summed over each batch in example order, then ``lr * g / batch_size``
    is subtracted.
    """
    if not dataset:
        raise ConfigError("sgd_epoch needs a nonempty dataset")
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(dataset))
    params = net.parameters()
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        acc = None
        for idx in batch:
            image, target = dataset[idx]
            if cfg.augment and spec is not None:
                image, target = augment(image, target, spec, rng)
            loss, _, grads = net.loss_and_grad(normalize_image(image), target)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, example {int(idx)}")
            total += loss
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
        step = lr / len(batch)
        for p, g in zip(params, acc):
            p -= step * g
    return net.params, total / len(order)


def mean_loss(net: ICNN, dataset) -> float:
    if not dataset:
        return float("nan")
    return float(np.mean([net.loss(normalize_image(x), y) for x, y in dataset]))


def fit(
    net: ICNN,
    train_set,
    val_set,
    cfg: TrainConfig,
    spec: AugmentSpec | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train until ``max_epochs`` or until validation loss stalls for ``patience`` evaluations.

    When a validation set is given, the parameters with the lowest validation
    loss are restored at the end.  Returns the per-epoch history.
    """
    history = []
    best, best_loss, stale = None, np.inf, 0
    lr = cfg.learning_rate
    for epoch in range(cfg.max_epochs):
        _, train_loss = sgd_epoch(net, train_set, cfg, spec, epoch, lr)
        record = {"epoch": epoch, "train_loss": train_loss, "learning_rate": lr}
        lr *= cfg.lr_decay
        if val_set and (epoch + 1) % cfg.eval_every == 0:
            val = mean_loss(net, val_set)
            record["val_loss"] = val
            if val < best_loss:
                best, best_loss, stale = [p.copy() for p in net.parameters()], val, 0
            else:
                stale += 1
        history.append(record)
        log.info("epoch %d train %.5f val %s", epoch, train_loss, record.get("val_loss"))
        if on_epoch:
            on_epoch(record)
        if stale >= cfg.patience:
            break
    if best is not None:
        for p, b in zip(net.parameters(), best):
            p[...] = b
    return history


# ---------------------------------------------------------------------------
# checkpoints


def _pack_config(cfg: ICNNConfig) -> bytes:
    vals = [cfg.num_columns, cfg.num_labels, cfg.interlink_rounds, len(cfg.maps_per_column),
            *cfg.maps_per_column, cfg.kernel_size, cfg.final_kernel_size, cfg.input_channels,
            *cfg.input_size]
    return struct.pack(f"<{len(vals)}I", *vals)


def checkpoint_bytes(config: ICNNConfig, params: ICNNParams, meta: dict | None = None) -> bytes:
    params.check(config)
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), _pack_config(config)]
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(meta_raw)) + meta_raw)
    blocks = params.arrays()
    out.append(struct.pack("<I", len(blocks)))
    for a in blocks:
        dims = a.shape if a.ndim == 4 else (a.shape[0], 1, 1, 1)
        out.append(struct.pack("<4I", *dims))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return with_crc(b"".join(out))


def save_checkpoint(path, config: ICNNConfig, params: ICNNParams, meta: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(config, params, meta))


def load_checkpoint(path) -> tuple[ICNNConfig, ICNNParams, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    r = Reader(path, _read_bytes(path), CKPT_MAGIC)
    at = r.pos
    n_col, n_lab, rounds, n_maps = r.unpack("<4I")
    if not 0 < n_maps <= 64:
        raise FileFormatError(path, "dims", at, f"implausible maps_per_column length {n_maps}")
    maps = r.unpack(f"<{n_maps}I")
    ks, fks, cin, ih, iw = r.unpack("<5I")
    try:
        config = ICNNConfig(num_labels=n_lab, num_columns=n_col, interlink_rounds=rounds,
                            maps_per_column=maps, kernel_size=ks, final_kernel_size=fks,
                            input_channels=cin, input_size=(ih, iw))
    except ConfigError as exc:
        raise FileFormatError(path, "dims", at, f"invalid config block: {exc}") from None
    at = r.pos
    (n_meta,) = r.unpack("<I")
    raw = r.array(np.uint8, n_meta).tobytes()
    try:
        meta = json.loads(raw.decode("utf-8"))
    except ValueError:
        raise FileFormatError(path, "meta", at, "meta block is not UTF-8 JSON") from None
    expected = config.layer_shapes()
    at = r.pos
    (n_blocks,) = r.unpack("<I")
    if n_blocks != 2 * len(expected):
        raise FileFormatError(path, "dims", at, f"{n_blocks} parameter blocks, expected {2 * len(expected)}")
    pairs = []
    for shape in expected:
        at = r.pos
        kdims = r.unpack("<4I")
        if kdims != shape:
            raise FileFormatError(path, "dims", at, f"kernel dims {kdims}, expected {shape}")
        kernel = r.array("<f4", int(np.prod(shape))).astype(np.float64).reshape(shape)
        at = r.pos
        bdims = r.unpack("<4I")
        if bdims != (shape[3], 1, 1, 1):
            raise FileFormatError(path, "dims", at, f"bias dims {bdims}, expected {(shape[3], 1, 1, 1)}")
        bias = r.array("<f4", shape[3]).astype(np.float64)
        pairs.append((kernel, bias))
    r.finish()
    return config, ICNNParams.from_pairs(pairs, config.num_columns), meta


def update_checkpoint_meta(path, **updates) -> dict:
    config, params, meta = load_checkpoint(path)
    meta.update(updates)
    save_checkpoint(path, config, params, meta)
    return meta
