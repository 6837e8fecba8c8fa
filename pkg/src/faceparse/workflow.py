"""Training, calibration and evaluation runs on manifest datasets."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import data_io
from .errors import ConfigError
from .evaluate import ConfusionCounts, accumulate
from .icnn import ICNN, ICNNConfig, init_params
from .pipeline import (
    NETWORK_IDS,
    NETWORK_LABELS,
    PARTS,
    STAGE1_SIZE,
    FaceParser,
    PartNetwork,
    calibrate_modulation,
    localize,
    median_point,
    part_examples,
    parts_with_fallbacks,
    stage1_example,
)
from .train import AugmentSpec, TrainConfig, fit, load_checkpoint, save_checkpoint, update_checkpoint_meta

log = logging.getLogger(__name__)

PATCH_SIZES = {"eyebrow": 64, "eye": 64, "nose": 64, "mouth": 80}


@dataclass(frozen=True)
class NetworkShape:
    """Architecture knobs shared by every network in a run."""

    num_columns: int = 4
    interlink_rounds: int = 3
    maps: tuple[int, ...] = (8, 8, 8, 8)
    kernel_size: int = 5
    final_kernel_size: int = 9

    def config(self, num_labels: int, size: int) -> ICNNConfig:
        maps = self.maps if len(self.maps) == self.num_columns else (self.maps[0],) * self.num_columns
        return ICNNConfig(num_labels=num_labels, num_columns=self.num_columns,
                          interlink_rounds=self.interlink_rounds, maps_per_column=maps,
                          kernel_size=self.kernel_size, final_kernel_size=self.final_kernel_size,
                          input_size=(size, size))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class RunLog:
    """JSON-lines log: a header with the effective configuration, then one line per epoch."""

    def __init__(self, path, header: dict):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        header = dict(header, config_hash=config_hash(header))
        self.path.write_text(json.dumps(header, sort_keys=True) + "\n")

    def __call__(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def mean_part_centers(dataset) -> dict[str, list[int]]:
    """Average ground-truth median point per part; used when stage 1 finds nothing."""
    sums = {p.name: np.zeros(2) for p in PARTS}
    counts = {p.name: 0 for p in PARTS}
    for _, labels in dataset:
        for p in PARTS:
            pt = median_point(labels, p.classes)
            if pt is not None:
                sums[p.name] += pt
                counts[p.name] += 1
    return {k: [int(round(v)) for v in sums[k] / counts[k]] for k in sums if counts[k]}


def _train_network(config, train_set, val_set, tcfg, aug, run_log, meta):
    params = init_params(config, tcfg.seed)
    net = ICNN(config, params)
    history = fit(net, train_set, val_set, tcfg, aug if tcfg.augment else None, on_epoch=run_log)
    meta = dict(meta, seed=tcfg.seed, epochs=len(history))
    return config, net.params, meta, history


def train_stage1(
    manifest,
    out_path,
    shape: NetworkShape,
    tcfg: TrainConfig,
    aug: AugmentSpec,
    extra_header: Mapping | None = None,
):
    train = data_io.load_dataset(manifest, "train")
    if not train:
        raise ConfigError(f"{manifest}: train split is empty")
    val = data_io.load_dataset(manifest, "val")
    config = shape.config(data_io.NUM_CLASSES, STAGE1_SIZE)
    header = {"network": "stage1", "train": asdict(tcfg), "augment": asdict(aug),
              "icnn": asdict(config), **(extra_header or {})}
    run_log = RunLog(Path(out_path).with_suffix(".log.jsonl"), header)
    meta = {"network_id": "stage1", "fallback_centers": mean_part_centers(train)}
    config, params, meta, history = _train_network(
        config, [stage1_example(x, y) for x, y in train], [stage1_example(x, y) for x, y in val],
        tcfg, aug, run_log, meta)
    save_checkpoint(out_path, config, params, meta)
    return history


def predicted_centers(stage1_ckpt, dataset) -> list[dict[str, tuple[int, int]]]:
    config, params, meta = load_checkpoint(stage1_ckpt)
    net = ICNN(config, params)
    parts = parts_with_fallbacks(meta.get("fallback_centers"))
    return [localize(net, image, parts).centers for image, _ in dataset]


def part_dataset(manifest, split, network_id, patch_centers="truth", stage1_ckpt=None):
    """Patches for one network; centres from ground truth or from a trained stage-1 network."""
    data = data_io.load_dataset(manifest, split)
    if patch_centers == "truth":
        return part_examples(data, network_id)
    if patch_centers != "stage1":
        raise ConfigError(f"patch_centers: expected 'truth' or 'stage1', got {patch_centers!r}")
    if stage1_ckpt is None or not Path(stage1_ckpt).exists():
        raise ConfigError("patch_centers=stage1 needs a trained stage-1 checkpoint")
    return part_examples(data, network_id, predicted_centers(stage1_ckpt, data))


def train_part(
    manifest,
    network_id: str,
    out_path,
    shape: NetworkShape,
    tcfg: TrainConfig,
    aug: AugmentSpec,
    patch_centers: str = "truth",
    stage1_ckpt=None,
    extra_header: Mapping | None = None,
):
    if network_id not in NETWORK_IDS:
        raise ConfigError(f"part: expected one of {NETWORK_IDS}, got {network_id!r}")
    train = part_dataset(manifest, "train", network_id, patch_centers, stage1_ckpt)
    if not train:
        raise ConfigError(f"{manifest}: train split is empty")
    val = part_dataset(manifest, "val", network_id, patch_centers, stage1_ckpt)
    config = shape.config(NETWORK_LABELS[network_id], PATCH_SIZES[network_id])
    header = {"network": network_id, "train": asdict(tcfg), "augment": asdict(aug),
              "icnn": asdict(config), "patch_centers": patch_centers, **(extra_header or {})}
    run_log = RunLog(Path(out_path).with_suffix(".log.jsonl"), header)
    meta = {"network_id": network_id, "modulation": [1.0, 0.0], "patch_centers": patch_centers}
    config, params, meta, history = _train_network(config, train, val, tcfg, aug, run_log, meta)
    save_checkpoint(out_path, config, params, meta)
    return history


def calibrate_part(manifest, network_id, ckpt_path, patch_centers="truth", stage1_ckpt=None):
    """Fit (beta, beta0) on the validation patches and store them in the checkpoint meta."""
    config, params, meta = load_checkpoint(ckpt_path)
    val = part_dataset(manifest, "val", network_id, patch_centers, stage1_ckpt)
    result = calibrate_modulation(PartNetwork(network_id, ICNN(config, params)), val)
    m = result.modulation
    update_checkpoint_meta(ckpt_path, modulation=[m.beta, m.beta0],
                           calibration={"f_before": result.f_before, "f_after": result.f_after})
    return result


@dataclass
class EvalResult:
    counts: ConfusionCounts
    localization_errors: list[dict[str, float]] = field(default_factory=list)
    fallbacks: int = 0

    def localization_hit_rate(self, tolerance: float = 8.0) -> float:
        errs = [e for rec in self.localization_errors for e in rec.values()]
        return float(np.mean([e <= tolerance for e in errs])) if errs else float("nan")


def evaluate_split(parser: FaceParser, manifest, split: str, executor=None,
                   on_image: Callable[[str, np.ndarray], None] | None = None) -> EvalResult:
    data = data_io.load_dataset(manifest, split)
    if not data:
        raise ConfigError(f"split {split!r} of {manifest} is empty")
    ids = data_io.record_ids(manifest, split)
    try:
        truth_centers = data_io.load_part_centers(manifest, split)
    except Exception:
        truth_centers = None

    def run(i):
        image, _ = data[i]
        # ICNN instances cache activations, so concurrent images need their own
        return (parser.clone() if executor else parser).parse(image)

    outputs = list(executor.map(run, range(len(data)))) if executor else [run(i) for i in range(len(data))]
    result = EvalResult(ConfusionCounts(data_io.NUM_CLASSES))
    for i, ((pred, loc), (_, labels)) in enumerate(zip(outputs, data)):
        result.counts = accumulate(result.counts, pred, labels)
        result.fallbacks += len(loc.fallback)
        if truth_centers is not None:
            result.localization_errors.append({
                k: float(np.hypot(*(np.subtract(loc.centers[k], v))))
                for k, v in truth_centers[i].items()
            })
        if on_image:
            on_image(ids[i], pred)
    return result
