import csv
import json
import os

import pytest

from eegadv.cli import main

from conftest import tiny_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "config.json"
    cfg.write_text(json.dumps(tiny_config().to_dict()))
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_pipeline_subcommands(workdir, capsys):
    cfg = workdir / "config.json"
    data, model, sub = workdir / "data.epochs", workdir / "target.model", workdir / "sub.model"
    assert run("gen-data", "--config", cfg, "--out", data) == 0
    assert run("train", "--config", cfg, "--data", data, "--exclude-subject", 0, "--out", model) == 0
    assert run("train", "--config", cfg, "--data", data, "--arch", "dense", "--out", sub) == 0
    for attack in ("fgsm", "pgd", "cw"):
        assert run("attack", "--config", cfg, "--model", model, "--data", data, "--attack", attack,
                   "--epsilon", 0.4, "--out", workdir / "adv") == 0
    assert run("attack", "--config", cfg, "--model", model, "--data", data, "--attack", "blackbox",
               "--substitute", sub, "--out", workdir / "adv") == 0
    assert sorted(os.listdir(workdir / "adv")) == sorted(
        f"{a}.{ext}" for a in ("fgsm", "pgd", "cw", "blackbox") for ext in ("epochs", "json"))

    for det in ("bu", "lid", "md"):
        out = workdir / f"{det}.csv"
        assert run("detect", "--model", model, "--reference", data, "--data", data, "--detector", det,
                   "--k", 10, "--adversarial", workdir / "adv" / "fgsm.epochs", "--attack-name", "fgsm",
                   "--out", out) == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 400 and {r["is_adversarial"] for r in rows} == {"0", "1"}
    assert "AUC" in capsys.readouterr().out


def test_run_and_report(workdir):
    cfg, out = workdir / "config.json", workdir / "results"
    assert run("run-whitebox", "--config", cfg, "--out", out, "--format", "json", "--format", "csv") == 0
    assert {"whitebox.json", "whitebox.csv", "whitebox.timing.json"} <= set(os.listdir(out))
    assert run("report", "--input", out / "whitebox.json", "--format", "md") == 0
    assert "Table 4" in (out / "whitebox.md").read_text()


def test_run_blackbox_and_generalization(workdir):
    cfg, out = workdir / "config.json", workdir / "results2"
    assert run("run-blackbox", "--config", cfg, "--out", out, "--folds", 1) == 0
    assert run("run-generalization", "--config", cfg, "--out", out, "--seed", 8) == 0
    report = json.loads((out / "generalization.json").read_text())
    assert report["config"]["seed"] == 8
    assert json.loads((out / "blackbox.json").read_text())["folds"][0]["fold"] == 1


def test_tune(workdir, capsys):
    assert run("tune", "--config", workdir / "config.json", "--detector", "md", "--attack", "pgd") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["detector"] == "MD_max" and out["chosen"]["0"] in (1e-4, 1e-3)


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"target": "nope"}))
    assert run("run-whitebox", "--config", bad) == 2
    assert run("run-whitebox", "--config", tmp_path / "missing.json") == 2


def test_data_error_exit_code(tmp_path):
    assert run("train", "--data", tmp_path / "missing.epochs", "--out", tmp_path / "m") == 3
    junk = tmp_path / "junk.epochs"
    junk.write_bytes(b"not a dataset")
    assert run("train", "--data", junk, "--out", tmp_path / "m") == 3
    assert run("report", "--input", tmp_path / "missing.json") == 3


def test_blackbox_needs_substitute(workdir):
    cfg = workdir / "config.json"
    assert run("attack", "--config", cfg, "--model", workdir / "target.model", "--data", workdir / "data.epochs",
               "--attack", "blackbox", "--out", workdir / "x") == 2


def test_argparse_rejects_unknown_choice():
    with pytest.raises(SystemExit) as exc:
        main(["detect", "--detector", "kde"])
    assert exc.value.code == 2
