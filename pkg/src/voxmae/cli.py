"""Command-line entry points.

Every command resolves defaults < ``--config`` file < ``--override`` flags,
writes the resolved config to ``<out>/config.yaml`` and then delegates to the
library. Failures exit with the error category's code and a single
``error category=<name> code=<n>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import torch

from . import adapt as A
from .checkpoint import backbone_from_checkpoint, build_backbone
from .config import (ExperimentConfig, PhantomSpec, default_output_root, dump_yaml, from_dict,
                     load_config, to_dict)
from .errors import InvalidConfigError, InvalidInputError, VoxMAEError
from .io import read_cohort, write_cohort
from .phantoms import generate_phantoms
from .pretrain import pretrain
from .report import assemble_report, write_report
from .tasks import build_splits, get_task
from .volume import center_crop_or_pad, make_splits, preprocess

CONFIG_ECHO = "config.yaml"


def _log(msg):
    print(msg, file=sys.stderr)


def resolve(args) -> ExperimentConfig:
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        s = args.seed
        overrides += [f"seed={s}", f"pretrain.seed={s}", f"adapt.seed={s}"]
    cfg = load_config(args.config, overrides)
    out = args.out or cfg.out_dir or str(Path(default_output_root()) / cfg.name)
    return replace(cfg, out_dir=out)


def echo_config(cfg: ExperimentConfig, name=CONFIG_ECHO):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(dump_yaml(cfg))
    return out


def load_cohort(cfg: ExperimentConfig):
    if cfg.data.root:
        root = Path(cfg.data.root)
        if not (root / "manifest.tsv").exists():
            raise InvalidInputError(f"no manifest.tsv under data.root {root}")
        subjects, manifest = read_cohort(root)
        if manifest is not None:
            return subjects, manifest
    else:
        if cfg.data.phantom is None:
            raise InvalidConfigError("data needs either root or phantom")
        subjects = generate_phantoms(cfg.data.phantom)
    ids = [s.volume.subject_id for s in subjects]
    return subjects, make_splits(ids, cfg.data.ratios, cfg.data.split_seed)


def _backbone(cfg: ExperimentConfig):
    ckpt = cfg.backbone.checkpoint
    if ckpt is None:
        default = Path(cfg.out_dir) / "checkpoints" / "last.pt"
        ckpt = str(default) if default.exists() else None
    if ckpt is None:
        _log("no checkpoint configured; adapting a randomly initialised backbone")
        return build_backbone(cfg.backbone.arch, cfg.backbone.active(), cfg.seed)
    if not Path(ckpt).exists():
        raise InvalidInputError(f"checkpoint {ckpt} does not exist")
    return backbone_from_checkpoint(ckpt, expect_arch=cfg.backbone.arch)[0]


def _task_names(args, cfg):
    names = [args.task] if getattr(args, "task", None) else list(cfg.tasks)
    if not names:
        raise InvalidConfigError("no task given; pass --task or list tasks in the config")
    return names


def _input_size(cfg):
    return tuple(cfg.backbone.active().img_size)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    overrides = list(args.override or [])
    data = {}
    if args.spec:
        import yaml

        data = yaml.safe_load(Path(args.spec).read_text()) or {}
        data = data.get("phantom", data)
    from .config import apply_overrides

    spec = from_dict(PhantomSpec, apply_overrides(to_dict(from_dict(PhantomSpec, data)), overrides))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out or Path(default_output_root()) / "phantoms")
    out.mkdir(parents=True, exist_ok=True)
    (out / "phantom_spec.yaml").write_text(dump_yaml(spec))
    subjects = generate_phantoms(spec)
    manifest = make_splits([s.volume.subject_id for s in subjects], (0.7, 0.1, 0.2), spec.seed)
    write_cohort(subjects, out, manifest)
    print(json.dumps({"out": str(out), "subjects": len(subjects), "splits": manifest.sizes()}))
    return 0


def cmd_pretrain(args):
    cfg = resolve(args)
    bcfg = cfg.backbone.active()
    bcfg.validate()
    out = echo_config(cfg)
    subjects, manifest = load_cohort(cfg)
    size = _input_size(cfg)
    by_id = {s.volume.subject_id: s for s in subjects}
    vols = []
    for sid in manifest.train_ids:
        v = preprocess(by_id[sid].volume)
        if not cfg.pretrain.augment and tuple(v.shape) != size:
            v = replace(v, data=center_crop_or_pad(v.data, size))
        vols.append(v)
    aug = cfg.data.augment
    if cfg.pretrain.augment and tuple(aug.crop_size) != size:
        raise InvalidConfigError(f"data.augment.crop_size {tuple(aug.crop_size)} must equal the backbone "
                                 f"img_size {size}")
    model = build_backbone(cfg.backbone.arch, bcfg, cfg.seed)
    history = pretrain(model, vols, cfg.pretrain, aug, out_dir=out, resume=args.resume)
    summary = {"checkpoint": str(out / "checkpoints" / "last.pt"), "steps": cfg.pretrain.steps,
               "final_loss": history[-1] if history else None}
    print(json.dumps(summary))
    return 0


def _adapt(args, regime=None):
    cfg = resolve(args)
    if regime is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, regime=regime))
    out = echo_config(cfg)
    names = _task_names(args, cfg)
    tasks = [get_task(n, cfg.tasks) for n in names]
    subjects, manifest = load_cohort(cfg)
    backbone = _backbone(cfg)
    results = {}
    for task in tasks:
        splits = build_splits(subjects, manifest, task, _input_size(cfg))
        reg = A.resolve_regime(task, cfg.adapt)
        run_dir = out / "runs" / task.name / reg
        run_dir.mkdir(parents=True, exist_ok=True)
        results[task.name] = []
        for r in range(cfg.adapt.runs):
            seed = cfg.adapt.seed + r
            rec, model = A.finetune(task, backbone, cfg.adapt, splits, seed=seed, level=cfg.eval.level)
            (run_dir / f"seed_{seed}.json").write_text(rec.to_json())
            torch.save(model.state_dict(), run_dir / f"seed_{seed}.pt")
            results[task.name].append({"seed": seed, "regime": reg, **rec.test_metrics,
                                       "encoder_unchanged": rec.encoder_checksum_before == rec.encoder_checksum_after})
    print(json.dumps(results, default=float))
    return 0


def cmd_finetune(args):
    return _adapt(args)


def cmd_probe(args):
    return _adapt(args, regime="linear_probe")


def cmd_sweep(args):
    from .report import plot_curves

    cfg = resolve(args)
    out = echo_config(cfg)
    subjects, manifest = load_cohort(cfg)
    backbone = _backbone(cfg)
    curves = {}
    for name in _task_names(args, cfg):
        task = get_task(name, cfg.tasks)
        splits = build_splits(subjects, manifest, task, _input_size(cfg))
        rows = A.data_efficiency_sweep(task, backbone, cfg.adapt, splits, level=cfg.eval.level)
        reg = A.resolve_regime(task, cfg.adapt)
        A.write_curve(rows, out / "runs" / task.name / f"sweep_{reg}.csv")
        curves[f"{task.name}/{reg}"] = rows
    plot_curves(curves, out / "plots" / "data_efficiency.png")
    print(json.dumps({k: [{"size": r["size"], "mean": r["mean"], "std": r["std"]} for r in v]
                      for k, v in curves.items()}))
    return 0


def cmd_evaluate(args):
    """Re-score saved finetuned models on the test split."""
    cfg = resolve(args)
    out = echo_config(cfg, "config.evaluate.yaml")
    subjects, manifest = load_cohort(cfg)
    backbone = _backbone(cfg)
    results = {}
    for name in _task_names(args, cfg):
        task = get_task(name, cfg.tasks)
        splits = build_splits(subjects, manifest, task, _input_size(cfg))
        task_dir = out / "runs" / task.name
        weights = sorted(task_dir.glob("*/seed_*.pt"))
        if not weights:
            raise InvalidInputError(f"no saved runs for task {task.name} under {task_dir}")
        results[task.name] = []
        for w in weights:
            model = A.build_task_model(task, backbone, 0,
                                       splits["train"].targets.numpy() if task.kind == "regression" else None)
            model.load_state_dict(torch.load(w, map_location="cpu", weights_only=True))
            preds, loss = A.predict(model, splits["test"], cfg.adapt.batch_size)
            metrics = A.score(task, preds, splits["test"], cfg.eval.level)
            (w.with_suffix(".eval.json")).write_text(json.dumps(metrics, indent=2, sort_keys=True))
            results[task.name].append({"run": str(w.relative_to(out)), **metrics})
    print(json.dumps(results))
    return 0


def collect_runs(exp_dir, regime=None):
    """``{task: [test_metrics, ...]}`` from an experiment directory's run records."""
    by_key = {}
    for p in sorted(Path(exp_dir).glob("runs/*/*/seed_*.json")):
        if p.name.endswith(".eval.json"):
            continue
        rec = A.RunRecord.from_json(p.read_text())
        if regime is not None and rec.regime != regime:
            continue
        by_key.setdefault((rec.task, rec.regime), []).append(rec.test_metrics)
    regimes = {}
    for task, reg in by_key:
        regimes.setdefault(task, []).append(reg)
    # tasks run under several regimes get one column group per regime
    return {(task if len(regimes[task]) == 1 else f"{task}[{reg}]"): recs for (task, reg), recs in by_key.items()}


def collect_curves(exp_dir):
    return {f"{p.parent.name}/{p.stem[len('sweep_'):]}": A.read_curve(p)
            for p in sorted(Path(exp_dir).glob("runs/*/sweep_*.csv"))}


def cmd_report(args):
    cfg = resolve(args)
    out = echo_config(cfg, "config.report.yaml")
    models = dict(cfg.eval.models) or {cfg.name: cfg.out_dir}
    runs, curves = {}, {}
    for label, d in models.items():
        if not Path(d).is_dir():
            raise InvalidInputError(f"model {label!r}: experiment directory {d} does not exist")
        per_task = collect_runs(d)
        if args.task:
            per_task = {k: v for k, v in per_task.items() if k.split("[")[0] == args.task}
        runs[label] = per_task
        curves.update({f"{label}:{k}": v for k, v in collect_curves(d).items()})
    if not any(runs.values()):
        raise InvalidInputError("no run records found for the configured models")
    rep = assemble_report(runs, comparisons=[tuple(c) for c in cfg.eval.comparisons], level=cfg.eval.level)
    paths = write_report(rep, out / "reports", curves=curves or None)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="voxmae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", help=f"output directory (default ${'{'}VOXMAE_OUTPUT_ROOT{'}'}/<name>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override; repeatable")
        if name == "synth-data":
            p.add_argument("--spec", help="YAML phantom spec")
            continue
        p.add_argument("--config", help="experiment YAML file")
        if name != "pretrain":
            p.add_argument("--task")
        if name == "pretrain":
            p.add_argument("--resume", help="checkpoint to resume from")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except VoxMAEError as err:
        _log(f"error category={err.category} code={err.exit_code}: {err}")
        return err.exit_code
    except FileNotFoundError as err:
        _log(f"error category={InvalidInputError.category} code={InvalidInputError.exit_code}: {err}")
        return InvalidInputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
