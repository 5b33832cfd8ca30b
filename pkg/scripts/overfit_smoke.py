"""Pretrain each backbone on a single phantom and report the loss reduction."""

import argparse
import json
from pathlib import Path

import torch

from voxmae.experiments import overfit_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--out", default=str(Path(__file__).parent / "calibration" / "overfit.json"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    result = {arch: overfit_smoke(arch, args.steps) for arch in ("vit", "conv")}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result, indent=1))
    print(json.dumps(result, indent=1))


if __name__ == "__main__":
    main()
