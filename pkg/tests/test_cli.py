import csv
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from vipolab.cli import main

FAST_TRAIN = {"max_outer_iters": 5, "gamma": 0.9}


def _json(path):
    return json.loads(Path(path).read_text())


def _write(path, doc):
    Path(path).write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def chain_dataset(tmp_path):
    out = tmp_path / "collect"
    cfg = _write(tmp_path / "collect.json", {"env": "chain", "n_episodes": 5, "horizon": 20})
    assert main(["collect", "--config", cfg, "--out", str(out)]) == 0
    return out / "dataset.jsonl"


def _train(tmp_path, data, name="model", doc=None, extra=()):
    cfg = _write(tmp_path / f"{name}.json", FAST_TRAIN if doc is None else doc)
    out = tmp_path / name
    return main(["train-model", "--dataset", str(data), "--config", cfg, "--out", str(out), *extra]), out


# --- parsing and exit codes ---------------------------------------------------------


def test_unknown_flag_exits_1_with_usage(tmp_path, capsys):
    assert main(["grad-check", "--out", str(tmp_path), "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_unknown_subcommand_exits_1(tmp_path, capsys):
    assert main(["fly", "--out", str(tmp_path)]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_required_flag_exits_1(tmp_path):
    assert main(["train-model", "--out", str(tmp_path)]) == 1


def test_bad_jobs_exits_1(tmp_path):
    assert main(["grad-check", "--out", str(tmp_path), "--jobs", "0"]) == 1


def test_missing_input_exits_1(tmp_path):
    assert main(["train-model", "--dataset", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 1


def test_unknown_config_key_exits_1(tmp_path, chain_dataset, capsys):
    status, _ = _train(tmp_path, chain_dataset, doc={"lamda": 0.3})
    assert status == 1
    assert "lamda" in capsys.readouterr().err


def test_malformed_config_exits_1(tmp_path, chain_dataset):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train-model", "--dataset", str(chain_dataset), "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 1


# --- grad-check ------------------------------------------------------------------------


def test_grad_check_default_spec_passes(tmp_path, capsys):
    assert main(["grad-check", "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("grad-check PASS: 50/50 instances")
    rows = list(csv.DictReader(open(tmp_path / "grad_check.csv")))
    assert list(rows[0]) == ["instance", "coordinate", "exact", "fd", "mc", "rel_error", "judged"]
    assert {int(r["instance"]) for r in rows} == set(range(50))
    assert _json(tmp_path / "manifest.json")["config"]["n_instances"] == 50


def test_grad_check_failure_exits_2(tmp_path, capsys):
    spec = _write(tmp_path / "spec.json", {"n_instances": 2, "tolerance": 1e-15, "step": 1e-2})
    assert main(["grad-check", "--spec", spec, "--out", str(tmp_path / "o")]) == 2
    assert "grad-check FAIL" in capsys.readouterr().out


# --- train-model -------------------------------------------------------------------------


def test_lambda_defaults_to_035_in_manifest(tmp_path, chain_dataset):
    status, out = _train(tmp_path, chain_dataset)
    assert status == 0
    manifest = _json(out / "manifest.json")
    assert manifest["config"]["lambda"] == 0.35
    assert manifest["subcommand"] == "train-model"
    assert manifest["seed"] == 0
    assert set(manifest["versions"]) >= {"python", "numpy", "scipy", "vipolab"}


def test_manifest_hashes_inputs(tmp_path, chain_dataset):
    _, out = _train(tmp_path, chain_dataset)
    inputs = _json(out / "manifest.json")["inputs"]
    assert inputs[str(chain_dataset)] == hashlib.sha256(chain_dataset.read_bytes()).hexdigest()


def test_train_outputs_curve_columns(tmp_path, chain_dataset):
    _, out = _train(tmp_path, chain_dataset)
    header = (out / "train_curve.csv").read_text().splitlines()[0]
    assert header == ("iteration,nll,l_vic_rho0,l_vic_data,augmented_loss,grad_norm,vd_residual,"
                      "vm_residual,holdout_error")
    assert _json(out / "model.json")["kind"] == "tabular"


def test_env_override_beats_config_file(tmp_path, chain_dataset, monkeypatch):
    monkeypatch.setenv("VIPOLAB_LAMBDA", "0.0")
    monkeypatch.setenv("VIPOLAB_MAX_OUTER_ITERS", "2")
    status, out = _train(tmp_path, chain_dataset, doc={"lambda": 0.9})
    assert status == 0
    cfg = _json(out / "manifest.json")["config"]
    assert (cfg["lambda"], cfg["max_outer_iters"]) == (0.0, 2)


def test_seed_flag_is_recorded(tmp_path, chain_dataset):
    _, out = _train(tmp_path, chain_dataset, extra=["--seed", "7"])
    manifest = _json(out / "manifest.json")
    assert manifest["seed"] == 7 and manifest["config"]["seed"] == 7


def test_identical_runs_give_identical_csv(tmp_path, chain_dataset):
    _, a = _train(tmp_path, chain_dataset, "a")
    _, b = _train(tmp_path, chain_dataset, "b")
    assert (a / "train_curve.csv").read_bytes() == (b / "train_curve.csv").read_bytes()
    assert (a / "model.json").read_bytes() == (b / "model.json").read_bytes()


# --- plan and eval ---------------------------------------------------------------------


def test_tabular_plan_and_eval(tmp_path, chain_dataset):
    _, model_dir = _train(tmp_path, chain_dataset)
    plan_cfg = _write(tmp_path / "plan.json", {"beta": 1.0, "gamma": 0.9})
    plan_out = tmp_path / "plan"
    assert main(["plan", "--model", str(model_dir / "model.json"), "--dataset", str(chain_dataset),
                 "--config", plan_cfg, "--out", str(plan_out)]) == 0
    policy = _json(plan_out / "policy.json")
    assert policy["kind"] == "tabular_policy"
    header = (plan_out / "q_values.csv").read_text().splitlines()[0]
    assert header == "state,action,q,uncertainty,prob"
    eval_cfg = _write(tmp_path / "eval.json", {"env": "chain"})
    assert main(["eval", "--policy", str(plan_out / "policy.json"), "--config", eval_cfg,
                 "--out", str(tmp_path / "eval")]) == 0
    rows = dict(csv.reader(open(tmp_path / "eval" / "eval.csv")))
    assert float(rows["return"]) <= float(rows["optimal_return"]) + 1e-9


def test_eval_rejects_mismatched_env(tmp_path, chain_dataset):
    _, model_dir = _train(tmp_path, chain_dataset)
    plan_out = tmp_path / "plan"
    cfg = _write(tmp_path / "plan.json", {"gamma": 0.9})
    main(["plan", "--model", str(model_dir / "model.json"), "--dataset", str(chain_dataset), "--config", cfg,
          "--out", str(plan_out)])
    grid = _write(tmp_path / "grid.json", {"env": "gridworld"})
    assert main(["eval", "--policy", str(plan_out / "policy.json"), "--config", grid,
                 "--out", str(tmp_path / "e")]) == 1


# --- isolation and determinism in a fresh process -------------------------------------------


def _run(args, cwd, home):
    env = {k: v for k, v in os.environ.items() if not k.startswith(("VIPOLAB_", "MPLCONFIGDIR"))}
    env.update(HOME=str(home), XDG_CACHE_HOME=str(home / ".cache"), XDG_CONFIG_HOME=str(home / ".config"))
    return subprocess.run([sys.executable, "-m", "vipolab.cli", *args], cwd=cwd, env=env,
                          capture_output=True, text=True)


def _tree(root):
    return {p for p in Path(root).rglob("*") if p.is_file()}


def test_nothing_is_written_outside_out(tmp_path):
    cwd, home = tmp_path / "cwd", tmp_path / "home"
    cwd.mkdir()
    home.mkdir()
    cfg = tmp_path / "cfg"
    cfg.mkdir()
    _write(cfg / "collect.json", {"env": "regulator", "n_episodes": 2, "horizon": 10})
    _write(cfg / "train.json", {"n_members": 2, "hidden": [4], "max_outer_iters": 1, "vd_steps": 5,
                                "vm_inner_steps": 2, "gamma": 0.9})
    _write(cfg / "plan.json", {"n_steps": 4, "hidden": [4], "batch_size": 8, "n_rollout_starts": 2})
    _write(cfg / "study.json", {"n_seeds": 2, "datasets": ["chain"], "n_episodes": 3,
                                "train": {"max_outer_iters": 2}})
    _write(cfg / "eval.json", {"env": "regulator"})
    before = _tree(tmp_path)
    runs = [["collect", "--config", str(cfg / "collect.json"), "--out", "o/collect"],
            ["train-model", "--dataset", "o/collect/dataset.jsonl", "--config", str(cfg / "train.json"),
             "--out", "o/train"],
            ["plan", "--model", "o/train/model.json", "--dataset", "o/collect/dataset.jsonl",
             "--config", str(cfg / "plan.json"), "--out", "o/plan"],
            ["eval", "--policy", "o/plan/actor.json", "--config", str(cfg / "eval.json"),
             "--out", "o/eval"],
            ["study", "model_error", "--config", str(cfg / "study.json"), "--out", "o/study"]]
    for args in runs:
        proc = _run(args, cwd, home)
        assert proc.returncode == 0, proc.stderr
    new = _tree(tmp_path) - before
    assert new and all(p.is_relative_to(cwd / "o") for p in new)


def test_study_reruns_are_byte_identical(tmp_path):
    home = tmp_path / "home"
    home.mkdir()
    cfg = _write(tmp_path / "study.json", {"n_seeds": 2, "datasets": ["chain"], "n_episodes": 3,
                                           "train": {"max_outer_iters": 2}})
    for name in ("a", "b"):
        proc = _run(["study", "model_error", "--config", cfg, "--out", str(tmp_path / name)], tmp_path, home)
        assert proc.returncode == 0, proc.stderr
    for f in ("model_error.csv", "model_error_seeds.csv", "model_error_heldout_mse.svg", "stats.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
