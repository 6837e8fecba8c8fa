"""Memorisation check: one part network trained on a few synthetic patches without augmentation.

    python scripts/run_overfit.py --out runs/overfit
"""
from __future__ import annotations

import argparse
import json
import logging
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from faceparse.experiments import OverfitConfig, run_overfit


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    for f in fields(OverfitConfig):
        ap.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    args = vars(ap.parse_args(argv))
    out = args.pop("out")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    with threadpool_limits(1):
        result = run_overfit(OverfitConfig(**args), out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "overfit.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(f"{result['patches']} patches, {result['steps']} steps: loss {result['loss']:.4f} "
          f"F {result['f']:.4f} ({'pass' if result['passed'] else 'FAIL'}, {result['seconds']:.0f} s)")


if __name__ == "__main__":
    main()
