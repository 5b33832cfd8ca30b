"""Four end-to-end phantom checks (classification, segmentation, regression, zones).

Writes scripts/calibration/downstream_<arch>.json; the acceptance suite's
thresholds were set from this run.
"""

import argparse
import json
import time
from dataclasses import asdict
from pathlib import Path

import torch

from voxmae.experiments import SmokeSettings, downstream_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="vit", choices=["vit", "conv"])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(Path(__file__).parent / "calibration"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    settings = SmokeSettings(arch=args.arch, epochs=args.epochs, seed=args.seed)
    t = time.time()
    result = downstream_smoke(settings)
    result["settings"] = asdict(settings)
    result["wall_seconds"] = time.time() - t
    out = Path(args.out) / f"downstream_{args.arch}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=1))
    print(json.dumps(result, indent=1))


if __name__ == "__main__":
    main()
