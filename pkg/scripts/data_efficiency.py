"""Limited-data sweep (8..128 finetuning subjects) on a phantom cohort, with a plot."""

import argparse
import json
from pathlib import Path

import torch

from voxmae.adapt import write_curve
from voxmae.experiments import data_efficiency_smoke
from voxmae.report import plot_curves


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--arch", default="vit", choices=["vit", "conv"])
    ap.add_argument("--task", default="PIRADS-Cls")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--out", default=str(Path(__file__).parent / "calibration"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    res = data_efficiency_smoke(args.arch, task_name=args.task, epochs=args.epochs)
    out = Path(args.out)
    write_curve(res["rows"], out / f"sweep_{args.arch}_{args.task}.csv")
    plot_curves({f"{args.arch}/{args.task}": res["rows"]}, out / f"sweep_{args.arch}_{args.task}.png")
    summary = [{k: r[k] for k in ("size", "metric", "mean", "std", "values")} for r in res["rows"]]
    print(json.dumps({"rows": summary, "seconds": res["seconds"]}, indent=1))


if __name__ == "__main__":
    main()
