"""Two-stage face parsing.

Stage 1 runs a 9-label network on a 64x64 resize of the face, takes the
median point of each predicted part and maps it back to full resolution.
Stage 2 crops a fixed-size patch around each point and labels it with one of
four part networks; right-side parts are mirrored so they share the left-side
network.  Patch predictions are pasted back into a full-size label map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .data_io import LAYOUT, NUM_CLASSES
from .errors import ConfigError, ShapeError
from .evaluate import ConfusionCounts, f_measure
from .icnn import ICNN
from .train import load_checkpoint, normalize_image as normalize

STAGE1_SIZE = 64
NETWORK_IDS = ("eyebrow", "eye", "nose", "mouth")
NETWORK_LABELS = {"eyebrow": 2, "eye": 2, "nose": 2, "mouth": 4}


@dataclass(frozen=True)
class PartDescriptor:
    name: str
    network_id: str
    classes: tuple[int, ...]  # full-palette classes, in network label order 1..L-1
    patch_size: int = 64
    flip: bool = False
    fallback_center: tuple[int, int] = (128, 128)

    @property
    def num_labels(self) -> int:
        return len(self.classes) + 1

    def with_fallback(self, center) -> "PartDescriptor":
        return PartDescriptor(self.name, self.network_id, self.classes, self.patch_size,
                              self.flip, (int(center[0]), int(center[1])))


def _default_center(name: str) -> tuple[int, int]:
    r, c = LAYOUT[name]
    if name == "nose":
        r += 24.0  # the layout stores the apex; the median sits lower
    return int(r), int(c)


PARTS: tuple[PartDescriptor, ...] = (
    PartDescriptor("left_eyebrow", "eyebrow", (1,), fallback_center=_default_center("left_eyebrow")),
    PartDescriptor("right_eyebrow", "eyebrow", (3,), flip=True, fallback_center=_default_center("right_eyebrow")),
    PartDescriptor("left_eye", "eye", (2,), fallback_center=_default_center("left_eye")),
    PartDescriptor("right_eye", "eye", (4,), flip=True, fallback_center=_default_center("right_eye")),
    PartDescriptor("nose", "nose", (5,), fallback_center=_default_center("nose")),
    PartDescriptor("mouth", "mouth", (6, 7, 8), patch_size=80, fallback_center=_default_center("mouth")),
)
PARTS_BY_NAME = {p.name: p for p in PARTS}


def parts_with_fallbacks(fallbacks: Mapping[str, Sequence[int]] | None) -> tuple[PartDescriptor, ...]:
    if not fallbacks:
        return PARTS
    return tuple(p.with_fallback(fallbacks[p.name]) if p.name in fallbacks else p for p in PARTS)


@dataclass(frozen=True)
class ModulationParams:
    beta: float = 1.0
    beta0: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.beta) and math.isfinite(self.beta0)):
            raise ConfigError("modulation parameters must be finite")

    def apply(self, logits: np.ndarray) -> np.ndarray:
        """Replace background channel B by beta*B + beta0."""
        if self.beta == 1.0 and self.beta0 == 0.0:
            return logits
        out = logits.copy()
        out[:, :, 0] = self.beta * logits[:, :, 0] + self.beta0
        return out


@dataclass
class PartNetwork:
    network_id: str
    net: ICNN
    modulation: ModulationParams = field(default_factory=ModulationParams)

    def logits(self, patch: np.ndarray) -> np.ndarray:
        """Pre-softmax maps for a raw (unnormalised) patch."""
        out = self.net.logits(normalize(patch))
        self.net.clear()
        return out


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class ScaleInfo:
    scale: float
    pad_top: int
    pad_left: int
    source_shape: tuple[int, int]

    def to_resized(self, point):
        r, c = point
        return ((r + 0.5) * self.scale - 0.5 + self.pad_top,
                (c + 0.5) * self.scale - 0.5 + self.pad_left)

    def to_original(self, point):
        r, c = point
        return ((r - self.pad_top + 0.5) / self.scale - 0.5,
                (c - self.pad_left + 0.5) / self.scale - 0.5)


def _sample_coords(n_out: int, scale: float, n_in: int) -> np.ndarray:
    """Source coordinates of output pixel centres (centre-aligned sampling)."""
    return np.clip((np.arange(n_out) + 0.5) / scale - 0.5, 0, n_in - 1)


def _bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, image.shape[0] - 1)
    c1 = np.minimum(c0 + 1, image.shape[1] - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bottom = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def resize_to(image: np.ndarray, target: int = STAGE1_SIZE, labels: np.ndarray | None = None):
    """Aspect-preserving resize so the long side equals ``target``; the short side is padded.

    Images are resampled bilinearly and padded with their per-channel mean;
    labels (if given) are resampled by nearest neighbour and padded with 0.
    Returns ``(image, scale_info)`` or ``(image, labels, scale_info)``.
    """
    image = tc.as_tensor3(image, "image")
    h, w = image.shape[:2]
    if min(h, w) < 1:
        raise ShapeError(f"degenerate image {h}x{w}")
    scale = target / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w):
        info = ScaleInfo(1.0, 0, 0, (h, w))
        if labels is None:
            return image.copy(), info
        return image.copy(), np.asarray(labels).copy(), info
    rows = _sample_coords(nh, scale, h)
    cols = _sample_coords(nw, scale, w)
    small = _bilinear(image, rows, cols)
    top, left = (target - nh) // 2, (target - nw) // 2
    out = np.empty((target, target, image.shape[2]))
    out[:] = image.mean(axis=(0, 1))
    out[top:top + nh, left:left + nw] = small
    info = ScaleInfo(scale, top, left, (h, w))
    if labels is None:
        return out, info
    labels = np.asarray(labels)
    ri = np.clip(np.floor(rows + 0.5).astype(int), 0, h - 1)
    ci = np.clip(np.floor(cols + 0.5).astype(int), 0, w - 1)
    lab = np.zeros((target, target), dtype=labels.dtype)
    lab[top:top + nh, left:left + nw] = labels[ri][:, ci]
    return out, lab, info


def median_point(labels: np.ndarray, channel_set) -> tuple[int, int] | None:
    """Component-wise lower median of the coordinates whose label is in ``channel_set``."""
    rows, cols = np.nonzero(np.isin(labels, list(channel_set)))
    n = rows.size
    if n == 0:
        return None
    k = (n - 1) // 2
    return int(np.partition(rows, k)[k]), int(np.partition(cols, k)[k])


@dataclass(frozen=True)
class PatchOrigin:
    row: int
    col: int
    size: int


def patch_origin(shape, center, size: int, mirrored: bool = False) -> PatchOrigin:
    """Top-left of a size x size window around ``center``, clamped into the image.

    Even sizes cannot be centred exactly; ``mirrored`` puts the extra column on
    the other side so a mirrored image yields the mirrored window.
    """
    h, w = shape[:2]
    if size > h or size > w:
        raise ShapeError(f"patch size {size} exceeds image {h}x{w}")
    r, c = int(round(center[0])), int(round(center[1]))
    left = size - 1 - size // 2 if mirrored else size // 2
    r0 = min(max(r - size // 2, 0), h - size)
    c0 = min(max(c - left, 0), w - size)
    return PatchOrigin(r0, c0, size)


def extract_patch(image: np.ndarray, center, size: int, mirrored: bool = False):
    o = patch_origin(np.shape(image), center, size, mirrored)
    return np.asarray(image)[o.row:o.row + size, o.col:o.col + size].copy(), o


def paste_patch(canvas: np.ndarray, patch: np.ndarray, origin: PatchOrigin) -> np.ndarray:
    out = canvas.copy()
    out[origin.row:origin.row + origin.size, origin.col:origin.col + origin.size] = patch
    return out


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Localization:
    centers: dict[str, tuple[int, int]]
    fallback: set[str]
    labels64: np.ndarray

    @property
    def warnings(self) -> list[str]:
        return [f"no pixels predicted for {name}; using fallback centre" for name in sorted(self.fallback)]


def localize(stage1: ICNN, image: np.ndarray, parts: Sequence[PartDescriptor] = PARTS) -> Localization:
    if stage1 is None:
        raise ConfigError("stage-1 network not loaded")
    small, info = resize_to(image, STAGE1_SIZE)
    probs = stage1.forward(normalize(small))
    labels64 = probs.argmax(axis=2)
    centers, fallback = {}, set()
    h, w = np.shape(image)[:2]
    for part in parts:
        point = median_point(labels64, part.classes)
        if point is None:
            centers[part.name] = part.fallback_center
            fallback.add(part.name)
            continue
        r, c = info.to_original(point)
        centers[part.name] = (int(np.clip(round(r), 0, h - 1)), int(np.clip(round(c), 0, w - 1)))
    return Localization(centers, fallback, labels64)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class PartPrediction:
    part: PartDescriptor
    origin: PatchOrigin
    labels: np.ndarray  # full-palette classes
    confidence: np.ndarray  # probability of the chosen label


def to_network_labels(labels: np.ndarray, part: PartDescriptor) -> np.ndarray:
    out = np.zeros(np.shape(labels), dtype=np.int64)
    for i, cls in enumerate(part.classes, start=1):
        out[labels == cls] = i
    return out


def to_palette(net_labels: np.ndarray, part: PartDescriptor) -> np.ndarray:
    lut = np.array((0,) + part.classes, dtype=np.int64)
    return lut[net_labels]


def network_input(image: np.ndarray, center, part: PartDescriptor):
    """Patch as the part network sees it (mirrored for right-side parts) and its origin."""
    patch, origin = extract_patch(image, center, part.patch_size, mirrored=part.flip)
    if part.flip:
        patch = tc.flip_horizontal(patch)
    return patch, origin


def predict_part(net: PartNetwork, image: np.ndarray, center, part: PartDescriptor) -> PartPrediction:
    patch, origin = network_input(image, center, part)
    probs = tc.softmax_channels(net.modulation.apply(net.logits(patch)))
    net_labels = probs.argmax(axis=2)
    conf = probs.max(axis=2)
    if part.flip:
        net_labels = tc.flip_horizontal(net_labels)
        conf = tc.flip_horizontal(conf)
    return PartPrediction(part, origin, to_palette(net_labels, part), conf)


def fine_label(
    part_nets: Mapping[str, PartNetwork],
    image: np.ndarray,
    centers: Mapping[str, Sequence[int]],
    parts: Sequence[PartDescriptor] = PARTS,
    executor=None,
) -> list[PartPrediction]:
    missing = {p.network_id for p in parts} - set(part_nets)
    if missing:
        raise ConfigError(f"missing part networks: {sorted(missing)}")
    jobs = [(part_nets[p.network_id], image, centers[p.name], p) for p in parts]
    if executor is None:
        return [predict_part(*job) for job in jobs]
    # distinct ICNN instances per job keep the per-episode caches separate
    return list(executor.map(lambda job: predict_part(_clone(job[0]), *job[1:]), jobs))


def _clone(net: PartNetwork) -> PartNetwork:
    return PartNetwork(net.network_id, ICNN(net.net.config, net.net.params), net.modulation)


def assemble(predictions: Sequence[PartPrediction], shape=(256, 256)) -> np.ndarray:
    """Paste patch labels onto a background canvas; overlapping foregrounds keep the more confident label."""
    labels = np.zeros(shape[:2], dtype=np.int64)
    conf = np.zeros(shape[:2])
    for pred in predictions:
        o = pred.origin
        sl = (slice(o.row, o.row + o.size), slice(o.col, o.col + o.size))
        region, region_conf = labels[sl], conf[sl]
        take = (pred.labels > 0) & ((region == 0) | (pred.confidence > region_conf))
        region[take] = pred.labels[take]
        region_conf[take] = pred.confidence[take]
    return labels


# ---------------------------------------------------------------------------
# background modulation calibration

COARSE_LOG2_BETA = np.linspace(-2.0, 2.0, 17)
COARSE_BETA0 = np.linspace(-3.0, 3.0, 25)
REFINE_STEPS = np.arange(-5, 6)


@dataclass(frozen=True)
class CalibrationResult:
    modulation: ModulationParams
    f_before: float
    f_after: float
    coarse_grid: tuple[int, int]
    refine_grid: tuple[int, int]


def _modulated_f(bg, fg_max, fg_arg, truth, num_labels, beta, beta0) -> float:
    pred = np.where(fg_max > beta * bg + beta0, fg_arg, 0)
    counts = ConfusionCounts(num_labels)
    counts.add_arrays(pred, truth)
    return f_measure(counts, range(1, num_labels))


def calibrate_from_logits(logits: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> CalibrationResult:
    """Grid-search (beta, beta0) maximising micro F-measure over the foreground labels.

    Coarse grid: 17 log-spaced beta in [0.25, 4] x 25 beta0 in [-3, 3]; then a
    11 x 11 pass at a fifth of the coarse spacing around the best point.  Ties
    go to the point closest to the identity (first |log beta|, then |beta0|).
    """
    if not logits:
        raise ConfigError("calibration needs a nonempty validation set")
    num_labels = logits[0].shape[2]
    bg = np.concatenate([l[:, :, 0].ravel() for l in logits])
    fg = np.concatenate([l[:, :, 1:].reshape(-1, num_labels - 1) for l in logits])
    fg_max = fg.max(axis=1)
    fg_arg = fg.argmax(axis=1) + 1
    truth = np.concatenate([np.asarray(t).ravel() for t in targets])

    def score(e, b0):
        return _modulated_f(bg, fg_max, fg_arg, truth, num_labels, 2.0 ** e, b0)

    def search(exps, offsets, best):
        for e in exps:
            for b0 in offsets:
                key = (score(e, b0), -abs(e), -abs(b0))
                if best is None or key > best[0]:
                    best = (key, e, b0)
        return best

    f_before = score(0.0, 0.0)
    best = search(COARSE_LOG2_BETA, COARSE_BETA0, None)
    _, e, b0 = best
    e_step = (COARSE_LOG2_BETA[1] - COARSE_LOG2_BETA[0]) / 5
    b_step = (COARSE_BETA0[1] - COARSE_BETA0[0]) / 5
    fine_e = [x for x in e + e_step * REFINE_STEPS if -2.0 - 1e-12 <= x <= 2.0 + 1e-12]
    fine_b = list(b0 + b_step * REFINE_STEPS)
    best = search(fine_e, fine_b, best)
    (f_after, _, _), e, b0 = best
    return CalibrationResult(
        ModulationParams(float(2.0 ** e), float(b0)),
        f_before,
        f_after,
        (len(COARSE_LOG2_BETA), len(COARSE_BETA0)),
        (len(fine_e), len(fine_b)),
    )


def calibrate_modulation(net, validation_set) -> CalibrationResult:
    """``net`` needs a ``logits(patch)`` method; the set holds (patch, network labels) pairs
    already oriented as the network sees them."""
    if not validation_set:
        raise ConfigError("calibration needs a nonempty validation set")
    logits = [net.logits(x) for x, _ in validation_set]
    return calibrate_from_logits(logits, [y for _, y in validation_set])


# ---------------------------------------------------------------------------
# training data and the end-to-end parser


def stage1_example(image: np.ndarray, labels: np.ndarray):
    small, lab, _ = resize_to(image, STAGE1_SIZE, labels)
    return small, lab


def part_examples(
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    network_id: str,
    centers: Sequence[Mapping[str, Sequence[int]]] | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Patches and network-space labels for one part network.

    Centres default to the ground-truth median of each part.  Right-side parts
    are mirrored and pooled with the left-side ones.
    """
    out = []
    parts = [p for p in PARTS if p.network_id == network_id]
    if not parts:
        raise ConfigError(f"unknown part network {network_id!r}")
    for i, (image, labels) in enumerate(dataset):
        for part in parts:
            if centers is not None:
                center = centers[i][part.name]
            else:
                center = median_point(labels, part.classes) or part.fallback_center
            patch, origin = network_input(image, center, part)
            lab = labels[origin.row:origin.row + part.patch_size, origin.col:origin.col + part.patch_size]
            if part.flip:
                lab = tc.flip_horizontal(lab)
            out.append((patch, to_network_labels(lab, part)))
    return out


@dataclass
class FaceParser:
    stage1: ICNN
    part_nets: dict[str, PartNetwork]
    parts: tuple[PartDescriptor, ...] = PARTS

    def parse(self, image: np.ndarray, executor=None) -> tuple[np.ndarray, Localization]:
        loc = localize(self.stage1, image, self.parts)
        preds = fine_label(self.part_nets, image, loc.centers, self.parts, executor)
        return assemble(preds, np.shape(image)[:2]), loc

    def clone(self) -> "FaceParser":
        """A parser sharing parameters but not activation caches."""
        return FaceParser(ICNN(self.stage1.config, self.stage1.params),
                          {k: _clone(v) for k, v in self.part_nets.items()}, self.parts)

    @classmethod
    def from_checkpoints(cls, directory) -> "FaceParser":
        directory = Path(directory)
        paths = {"stage1": directory / "stage1.ckpt"}
        paths.update({n: directory / f"{n}.ckpt" for n in NETWORK_IDS})
        for name, p in paths.items():
            if not p.exists():
                raise ConfigError(f"missing {name} checkpoint {p}")
        config, params, meta = load_checkpoint(paths["stage1"])
        if config.num_labels != NUM_CLASSES:
            raise ConfigError(f"stage-1 checkpoint has {config.num_labels} labels, expected {NUM_CLASSES}")
        stage1 = ICNN(config, params)
        parts = parts_with_fallbacks(meta.get("fallback_centers"))
        nets = {}
        for n in NETWORK_IDS:
            config, params, meta = load_checkpoint(paths[n])
            if config.num_labels != NETWORK_LABELS[n]:
                raise ConfigError(f"{n} checkpoint has {config.num_labels} labels, expected {NETWORK_LABELS[n]}")
            mod = ModulationParams(*meta.get("modulation", (1.0, 0.0)))
            nets[n] = PartNetwork(n, ICNN(config, params), mod)
        return cls(stage1, nets, parts)
