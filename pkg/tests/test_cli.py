import json
from pathlib import Path

import pytest
import yaml

from voxmae.cli import collect_runs, main

ROOT = Path(__file__).resolve().parents[1]
TINY = str(ROOT / "configs" / "tiny_vit.yaml")
FAST = ["data.phantom.n_subjects=20", "pretrain.steps=4", "pretrain.checkpoint_every=2", "adapt.epochs=1",
        "adapt.runs=2", "adapt.warmup_epochs=0"]


def run(capsys, *argv):
    args = list(argv)
    for o in FAST:
        args += ["--override", o]
    code = main(args)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    args = ["pretrain", "--config", TINY, "--out", str(out)]
    for o in FAST:
        args += ["--override", o]
    assert main(args) == 0
    return out


def test_pretrain_outputs_and_echo(pretrained):
    assert (pretrained / "checkpoints" / "last.pt").exists()
    assert (pretrained / "checkpoints" / "step_000002.pt").exists()
    assert len((pretrained / "loss_curve.csv").read_text().splitlines()) == 5
    echo = yaml.safe_load((pretrained / "config.yaml").read_text())
    assert echo["backbone"]["vit"]["mask_ratio"] == 0.75 and echo["backbone"]["conv"]["mask_ratio"] == 0.6
    assert echo["pretrain"]["steps"] == 4 and echo["out_dir"] == str(pretrained)


def test_finetune_probe_evaluate_report(pretrained, capsys):
    code, out, _ = run(capsys, "finetune", "--config", TINY, "--out", str(pretrained), "--task", "PIRADS-Cls")
    assert code == 0
    res = json.loads(out)["PIRADS-Cls"]
    assert len(res) == 2 and all("qwk" in r for r in res)
    assert (pretrained / "runs" / "PIRADS-Cls" / "full_llrd" / "seed_0.json").exists()

    code, out, _ = run(capsys, "probe", "--config", TINY, "--out", str(pretrained), "--task", "LesionPresence")
    assert code == 0 and all(r["encoder_unchanged"] for r in json.loads(out)["LesionPresence"])

    code, out, _ = run(capsys, "evaluate", "--config", TINY, "--out", str(pretrained), "--task", "PIRADS-Cls")
    assert code == 0
    evaluated = json.loads(out)["PIRADS-Cls"]
    stored = collect_runs(pretrained)["PIRADS-Cls"]
    assert [e["qwk"] for e in evaluated] == pytest.approx([s["qwk"] for s in stored], abs=1e-6)

    code, out, _ = run(capsys, "report", "--config", TINY, "--out", str(pretrained))
    assert code == 0 and (pretrained / "reports" / "table.csv").exists()
    assert (pretrained / "config.report.yaml").exists()


def test_two_model_report(pretrained, tmp_path, capsys):
    other = tmp_path / "other"
    for d, seed in ((pretrained, "0"), (other, "1")):
        code, _, _ = run(capsys, "probe", "--config", TINY, "--out", str(d), "--task", "Volume-Reg", "--seed", seed)
        assert code == 0
    rep_out = tmp_path / "rep"
    code, _, _ = run(capsys, "report", "--config", TINY, "--out", str(rep_out), "--task", "Volume-Reg",
                     "--override", f"eval.models={{a: {pretrained}, b: {other}}}",
                     "--override", "eval.comparisons=[[a, b]]")
    assert code == 0
    rows = (rep_out / "reports" / "comparisons.csv").read_text().splitlines()
    assert len(rows) == 2
    p = float(rows[1].split(",")[5])
    assert 0.0 <= p <= 1.0


def test_reproducible_from_echo(pretrained, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, out_a, _ = run(capsys, "finetune", "--config", TINY, "--out", str(a), "--task", "LesionPresence",
                         "--override", f"backbone.checkpoint={pretrained / 'checkpoints' / 'last.pt'}")
    assert code == 0
    code = main(["finetune", "--config", str(a / "config.yaml"), "--out", str(b), "--task", "LesionPresence"])
    out_b, _ = capsys.readouterr()
    assert code == 0 and json.loads(out_a) == json.loads(out_b)


def test_unknown_task_lists_catalogue(pretrained, capsys):
    code, _, err = run(capsys, "finetune", "--config", TINY, "--out", str(pretrained), "--task", "Nope")
    assert code == 4 and "category=invalid-config" in err and "PIRADS-Cls" in err


def test_error_exit_codes(tmp_path, capsys):
    code, _, err = run(capsys, "finetune", "--config", TINY, "--out", str(tmp_path), "--task", "GlandSeg",
                       "--override", "backbone.checkpoint=/nonexistent.pt")
    assert code == 3 and "category=invalid-input" in err
    code, _, err = run(capsys, "pretrain", "--config", TINY, "--out", str(tmp_path), "--override", "adapt.bogus=1")
    assert code == 4
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_synth_data(tmp_path, capsys):
    code = main(["synth-data", "--out", str(tmp_path), "--seed", "2", "--override", "n_subjects=10",
                 "--override", "grid_size=[32, 32, 32]"])
    out, _ = capsys.readouterr()
    assert code == 0 and json.loads(out)["subjects"] == 10
    assert (tmp_path / "manifest.tsv").exists() and (tmp_path / "phantom_spec.yaml").exists()
    code, out, _ = run(capsys, "probe", "--config", TINY, "--out", str(tmp_path / "exp"), "--task", "GlandSeg",
                       "--override", f"data.root={tmp_path}")
    assert code == 0
