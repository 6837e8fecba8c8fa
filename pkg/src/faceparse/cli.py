"""Command-line entry point: ``faceparse {synth,train,calibrate,predict,eval,gradcheck}``.

Settings come from defaults, then an optional ``key = value`` file (--config),
then ``--set key=value`` and the global flags.  Errors print one line
``ERROR <kind>: <reason>`` on stderr and exit with the code of their class.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data_io, gradcheck
from .errors import ConfigError, FaceParseError
from .evaluate import format_report, report, report_tsv
from .pipeline import NETWORK_IDS, FaceParser
from .train import AugmentSpec, TrainConfig
from .workflow import NetworkShape, calibrate_part, evaluate_split, train_part, train_stage1

log = logging.getLogger("faceparse")


@dataclass(frozen=True)
class RunConfig:
    # run
    seed: int = 0
    threads: int = 1
    out: str = "run"
    manifest: str = ""  # empty: <out>/data/manifest.txt
    checkpoint_dir: str = ""  # empty: <out>/checkpoints
    # synthetic data
    count: int = 260
    val_count: int = 30
    test_count: int = 30
    image_size: int = 256
    face_shift: float = 8.0
    part_shift: float = 3.0
    size_jitter: float = 0.15
    brow_tilt: float = 10.0
    color_jitter: float = 0.04
    noise: float = 0.02
    # network
    num_columns: int = 4
    interlink_rounds: int = 3
    maps: int = 8
    kernel_size: int = 5
    final_kernel_size: int = 9
    # training
    learning_rate: float = 0.05
    batch_size: int = 1
    max_epochs: int = 20
    augment: bool = True
    eval_every: int = 1
    lr_decay: float = 1.0
    patience: int = 10
    patch_centers: str = "truth"
    # augmentation
    max_rotation: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    max_shift: float = 10.0

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f"threads: must be >= 1, got {self.threads}")
        if self.patch_centers not in ("truth", "stage1"):
            raise ConfigError(f"patch_centers: expected truth or stage1, got {self.patch_centers!r}")
        if self.maps < 1:
            raise ConfigError(f"maps: must be >= 1, got {self.maps}")
        # the component configs do their own range checks
        self.synth_spec().validate()
        self.train_config()
        self.augment_spec()
        self.network_shape().config(2, 64)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.out) / "data" / "manifest.txt"

    @property
    def checkpoints(self) -> Path:
        return Path(self.checkpoint_dir) if self.checkpoint_dir else Path(self.out) / "checkpoints"

    def synth_spec(self) -> data_io.SynthSpec:
        return data_io.SynthSpec(**{k: getattr(self, k) for k in data_io.synth_spec_keys()})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(self.max_rotation, (self.scale_min, self.scale_max), self.max_shift)

    def network_shape(self) -> NetworkShape:
        return NetworkShape(self.num_columns, self.interlink_rounds, (self.maps,) * self.num_columns,
                            self.kernel_size, self.final_kernel_size)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_assignments(lines, source: str = "<flags>") -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise ConfigError(f"config file {path} is not UTF-8") from None
        values.update(parse_assignments(text.splitlines(), str(path)))
    values.update(overrides or {})
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    manifest = data_io.generate_synthetic(cfg.synth_spec(), cfg.manifest_path.parent)
    print(f"manifest {manifest}")
    print(f"checksum {data_io.dataset_checksum(manifest)}")
    return 0


def _require_manifest(cfg: RunConfig) -> Path:
    if not cfg.manifest_path.exists():
        raise ConfigError(f"manifest {cfg.manifest_path} not found (run synth or set manifest)")
    return cfg.manifest_path


def _run_header(cfg: RunConfig) -> dict:
    return {"run_config": dataclasses.asdict(cfg)}


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = _require_manifest(cfg)
    ckpt_dir = cfg.checkpoints
    if args.stage == 1:
        if args.part:
            raise ConfigError("part: only valid with --stage 2")
        out = ckpt_dir / "stage1.ckpt"
        history = train_stage1(manifest, out, cfg.network_shape(), cfg.train_config(),
                               cfg.augment_spec(), _run_header(cfg))
    else:
        if args.part not in NETWORK_IDS:
            raise ConfigError(f"part: stage 2 needs one of {', '.join(NETWORK_IDS)}")
        out = ckpt_dir / f"{args.part}.ckpt"
        history = train_part(manifest, args.part, out, cfg.network_shape(), cfg.train_config(),
                             cfg.augment_spec(), cfg.patch_centers, ckpt_dir / "stage1.ckpt",
                             _run_header(cfg))
    last = history[-1] if history else {}
    print(f"checkpoint {out}")
    print(f"epochs {len(history)}  final train loss {last.get('train_loss', float('nan')):.6f}")
    return 0


def cmd_calibrate(cfg: RunConfig, args) -> int:
    if args.part not in NETWORK_IDS:
        raise ConfigError(f"part: expected one of {', '.join(NETWORK_IDS)}")
    manifest = _require_manifest(cfg)
    ckpt = cfg.checkpoints / f"{args.part}.ckpt"
    res = calibrate_part(manifest, args.part, ckpt, cfg.patch_centers, cfg.checkpoints / "stage1.ckpt")
    cg, rg = res.coarse_grid, res.refine_grid
    print(f"grid coarse {cg[0]}x{cg[1]} + refine {rg[0]}x{rg[1]}")
    print(f"validation F before {res.f_before:.6f} after {res.f_after:.6f}")
    print(f"beta {res.modulation.beta:.6g} beta0 {res.modulation.beta0:.6g}")
    return 0


def _executor(cfg: RunConfig):
    return ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else contextlib.nullcontext()


def save_visualization(path, labels: np.ndarray) -> None:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data_io.PALETTE[labels]).save(path, format="PNG")


def cmd_predict(cfg: RunConfig, args) -> int:
    parser = FaceParser.from_checkpoints(cfg.checkpoints)
    image = data_io.read_tensor(args.image)
    with _executor(cfg) as pool:
        labels, loc = parser.parse(image, pool)
    for w in loc.warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = Path(args.output) if args.output else Path(cfg.out) / (Path(args.image).stem + ".labels")
    data_io.write_labels(out, labels)
    print(f"labels {out}")
    if args.vis:
        save_visualization(args.vis, labels)
        print(f"visualization {args.vis}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    manifest = _require_manifest(cfg)
    parser = FaceParser.from_checkpoints(cfg.checkpoints)
    with _executor(cfg) as pool:
        result = evaluate_split(parser, manifest, args.split, pool)
    rows = report(result.counts)
    text = format_report(rows)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{args.split}.txt").write_text(text)
    (out / f"report_{args.split}.tsv").write_text(report_tsv(rows))
    print(text, end="")
    if result.localization_errors:
        print(f"localization within 8 px: {result.localization_hit_rate(8.0):.3f}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    hook = gradcheck.corrupted_backward(args.corrupt) if args.corrupt else contextlib.nullcontext()
    t0 = time.perf_counter()
    with hook:
        results = gradcheck.run_all(seed=cfg.seed)
    print(gradcheck.format_results(results))
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: worst {max(r.max_rel_error for r in results):.3e} "
          f"(tolerance {gradcheck.TOLERANCE:g}, {time.perf_counter() - t0:.1f} s)")
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS so flags given before the subcommand are not reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="faceparse", description="iCNN face parsing", parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic face dataset")
    p.add_argument("--count", type=int)
    p = sub.add_parser("train", parents=[common], help="train the stage-1 or one stage-2 network")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--part", choices=NETWORK_IDS)
    p = sub.add_parser("calibrate", parents=[common], help="fit background modulation on validation data")
    p.add_argument("--part", choices=NETWORK_IDS, required=True)
    p = sub.add_parser("predict", parents=[common], help="label one TensorFile image")
    p.add_argument("image")
    p.add_argument("--output", help="label map path (default <out>/<stem>.labels)")
    p.add_argument("--vis", help="also write a colour PNG here")
    p = sub.add_parser("eval", parents=[common], help="F-measure report on a manifest split")
    p.add_argument("--split", choices=data_io.SPLITS, default="test")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--corrupt", metavar="KIND", help=argparse.SUPPRESS)
    return ap


def config_from_args(args) -> RunConfig:
    overrides = parse_assignments(getattr(args, "set", []))
    for key in ("seed", "threads", "out", "count"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return load_config(getattr(args, "config", None), overrides)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = config_from_args(args)
        # single-threaded BLAS keeps floating-point reductions identical between runs
        with threadpool_limits(1):
            return COMMANDS[args.command](cfg, args)
    except FaceParseError as exc:
        print(f"ERROR {exc.kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return 8


if __name__ == "__main__":
    sys.exit(main())
