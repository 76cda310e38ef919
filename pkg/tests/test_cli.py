"""CLI tests; every command runs in-process through cli_main."""

import json
import os

import pytest

from pmedit import load_facts, load_model, read_metrics_csv
from pmedit.cli import cli_main

MODEL_CONFIG = {"num_layers": 3, "d_model": 8, "d_ffn": 12, "seed": 2}

PLAN = {
    "algorithm": "memit",
    "layer": 1,
    "strategy": "sequential_batched",
    "batch_size": 2,
    "total_edits": 4,
    "seed": 11,
    "model_config": MODEL_CONFIG,
    "num_facts": 12,
    "preservation_samples": 24,
}

RUN_FILES = ("manifest.json", "plan.json", "metrics.csv", "plot_s.svg", "plot_s.png")


def write_json(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def make_model(tmp_path, config=None):
    cfg = write_json(tmp_path, "model_config.json", config or MODEL_CONFIG)
    out = str(tmp_path / "model.json")
    assert cli_main(["gen-model", "--config", cfg, "--out", out]) == 0
    return out


# ---------------------------------------------------------------- gen-model


def test_gen_model(tmp_path, capsys):
    path = make_model(tmp_path)
    model = load_model(path)
    assert model.config.num_layers == 3 and model.config.seed == 2
    assert "wrote model" in capsys.readouterr().out

    again = str(tmp_path / "model2.json")
    cfg = write_json(tmp_path, "model_config.json", MODEL_CONFIG)
    assert cli_main(["gen-model", "--config", cfg, "--out", again]) == 0
    assert open(path, "rb").read() == open(again, "rb").read()


def test_gen_model_rejects_bad_configs(tmp_path, capsys):
    no_seed = write_json(tmp_path, "c1.json", {"num_layers": 3, "d_model": 8, "d_ffn": 12})
    assert cli_main(["gen-model", "--config", no_seed, "--out", str(tmp_path / "m.json")]) == 1
    assert "seed" in capsys.readouterr().err

    unknown = write_json(tmp_path, "c2.json", {**MODEL_CONFIG, "width": 4})
    assert cli_main(["gen-model", "--config", unknown, "--out", str(tmp_path / "m.json")]) == 1

    not_json = tmp_path / "c3.json"
    not_json.write_text("{", encoding="utf-8")
    assert cli_main(["gen-model", "--config", str(not_json), "--out", str(tmp_path / "m.json")]) == 1

    assert cli_main(["gen-model", "--config", str(tmp_path / "nope.json"), "--out", "x"]) == 1


# ---------------------------------------------------------------- gen-facts


def test_gen_facts(tmp_path):
    model_path = make_model(tmp_path)
    cfg = write_json(tmp_path, "facts_config.json", {"layer": 1, "count": 5, "seed": 3})
    out = str(tmp_path / "facts.json")
    assert cli_main(["gen-facts", "--model", model_path, "--config", cfg, "--out", out]) == 0
    facts, layer = load_facts(out)
    assert len(facts) == 5 and layer == 1


def test_gen_facts_rejects_bad_configs(tmp_path, capsys):
    model_path = make_model(tmp_path)
    missing = write_json(tmp_path, "f1.json", {"count": 5, "seed": 3})
    assert cli_main(["gen-facts", "--model", model_path, "--config", missing, "--out", "x"]) == 1
    assert "layer" in capsys.readouterr().err

    unknown = write_json(tmp_path, "f2.json", {"layer": 1, "count": 5, "seed": 3, "extra": 1})
    assert cli_main(["gen-facts", "--model", model_path, "--config", unknown, "--out", "x"]) == 1

    deep = write_json(tmp_path, "f3.json", {"layer": 9, "count": 5, "seed": 3})
    assert cli_main(["gen-facts", "--model", model_path, "--config", deep, "--out", "x"]) == 1


# ---------------------------------------------------------------- edit


def test_edit_writes_run_dir(tmp_path, capsys):
    cfg = write_json(tmp_path, "plan.json", PLAN)
    out_dir = tmp_path / "run"
    assert cli_main(["edit", "--config", cfg, "--out", str(out_dir)]) == 0
    for name in RUN_FILES:
        assert (out_dir / name).exists(), name

    rows = read_metrics_csv(str(out_dir / "metrics.csv"))
    assert [r["edits_so_far"] for r in rows] == [2, 4]

    manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["finished"] is not None
    assert len(manifest["output_paths"]) == 4

    echoed = json.loads((out_dir / "plan.json").read_text(encoding="utf-8"))
    assert echoed["algorithm"] == "memit" and echoed["lambda"] == 1.0

    stdout = capsys.readouterr().out
    assert "final es=" in stdout and str(out_dir / "metrics.csv") in stdout


def test_edit_singular_and_batched(tmp_path):
    singular = dict(PLAN, algorithm="rome", strategy="singular", batch_size=1)
    cfg = write_json(tmp_path, "p1.json", singular)
    out_dir = tmp_path / "run1"
    assert cli_main(["edit", "--config", cfg, "--out", str(out_dir)]) == 0
    assert len(read_metrics_csv(str(out_dir / "metrics.csv"))) == 4

    batched = dict(PLAN, algorithm="emmet", strategy="batched", batch_size=4)
    cfg = write_json(tmp_path, "p2.json", batched)
    out_dir = tmp_path / "run2"
    assert cli_main(["edit", "--config", cfg, "--out", str(out_dir)]) == 0
    rows = read_metrics_csv(str(out_dir / "metrics.csv"))
    assert len(rows) == 1 and rows[0]["edits_so_far"] == 4


def test_edit_numerical_failure_exits_2(tmp_path, capsys):
    doomed = dict(
        PLAN, algorithm="emmet", strategy="batched", batch_size=16, total_edits=16, num_facts=16
    )
    cfg = write_json(tmp_path, "plan.json", doomed)
    assert cli_main(["edit", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
    assert "SingularGram" in capsys.readouterr().err


def test_edit_rejects_unknown_plan_field(tmp_path, capsys):
    cfg = write_json(tmp_path, "plan.json", {**PLAN, "epochs": 3})
    assert cli_main(["edit", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    assert "epochs" in capsys.readouterr().err


# ---------------------------------------------------------------- sweeps


def test_layer_sweep_cli(tmp_path, capsys):
    doc = dict(PLAN, algorithm="rome", strategy="singular", batch_size=1, layers=[1, 2])
    cfg = write_json(tmp_path, "sweep.json", doc)
    out_dir = tmp_path / "sweep"
    assert cli_main(["layer-sweep", "--config", cfg, "--out", str(out_dir)]) == 0
    for name in RUN_FILES:
        assert (out_dir / name).exists(), name
    rows = read_metrics_csv(str(out_dir / "metrics.csv"))
    assert [r["layer"] for r in rows] == [1, 2]
    assert "best layer" in capsys.readouterr().out


def test_layer_sweep_config_errors(tmp_path):
    no_layers = write_json(tmp_path, "s1.json", dict(PLAN, strategy="singular", batch_size=1, algorithm="rome"))
    assert cli_main(["layer-sweep", "--config", no_layers, "--out", str(tmp_path / "d")]) == 1

    wrong_strategy = write_json(tmp_path, "s2.json", dict(PLAN, layers=[1]))
    assert cli_main(["layer-sweep", "--config", wrong_strategy, "--out", str(tmp_path / "d")]) == 1


def test_lambda_sweep_cli(tmp_path, capsys):
    doc = dict(PLAN, strategy="batched", batch_size=4, lambdas=[0.01, 1.0])
    cfg = write_json(tmp_path, "sweep.json", doc)
    out_dir = tmp_path / "sweep"
    assert cli_main(["lambda-sweep", "--config", cfg, "--out", str(out_dir)]) == 0
    rows = read_metrics_csv(str(out_dir / "metrics.csv"))
    assert [r["run_id"].rpartition("-lam")[2] for r in rows] == ["0.01", "1"]
    assert "lambda sweep" in capsys.readouterr().out


def test_lambda_sweep_config_errors(tmp_path):
    not_batched = write_json(tmp_path, "s1.json", dict(PLAN, lambdas=[0.1]))
    assert cli_main(["lambda-sweep", "--config", not_batched, "--out", str(tmp_path / "d")]) == 1

    no_lambdas = write_json(tmp_path, "s2.json", dict(PLAN, strategy="batched", batch_size=4))
    assert cli_main(["lambda-sweep", "--config", no_lambdas, "--out", str(tmp_path / "d")]) == 1


# ---------------------------------------------------------------- report


def test_report_cli(tmp_path, capsys):
    cfg = write_json(tmp_path, "plan.json", PLAN)
    run_dir = tmp_path / "run"
    assert cli_main(["edit", "--config", cfg, "--out", str(run_dir)]) == 0
    capsys.readouterr()

    out = tmp_path / "es_plot.svg"
    code = cli_main(
        [
            "report",
            "--csv", str(run_dir / "metrics.csv"),
            "--metric", "es",
            "--group-by", "batch_size",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert out.exists() and (tmp_path / "es_plot.png").exists()
    stdout = capsys.readouterr().out
    assert str(out) in stdout

    bad_metric = cli_main(
        ["report", "--csv", str(run_dir / "metrics.csv"), "--metric", "acc",
         "--group-by", "batch_size", "--out", str(out)]
    )
    assert bad_metric == 1


# ---------------------------------------------------------------- dispatch


def test_top_level_dispatch(tmp_path, capsys):
    assert cli_main([]) == 1
    assert "subcommand" in capsys.readouterr().err

    assert cli_main(["frobnicate"]) == 1
    capsys.readouterr()

    assert cli_main(["--help"]) == 0
    assert "gen-model" in capsys.readouterr().out

    assert cli_main(["edit", "--config"]) == 1  # flag without value
    capsys.readouterr()

    # missing config file surfaces as an io error, not a traceback
    assert cli_main(["edit", "--config", str(tmp_path / "ghost.json"), "--out", "x"]) == 1


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run(
        [sys.executable, "-m", "pmedit", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "pmedit" in proc.stdout
