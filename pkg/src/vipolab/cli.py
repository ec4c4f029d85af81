"""Command-line entry point: `vipolab <subcommand> --out DIR [...]`.

Every run writes `manifest.json` (resolved config, seed, package versions,
sha256 of each input file) and `timing.json` into --out. Config values come
from the subcommand defaults, then the --config JSON file, then
VIPOLAB_<KEY> environment variables (JSON-parsed, raw string otherwise).

Exit status: 0 success, 1 bad usage/config/input, 2 runtime failure or a
failed check.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields
from importlib import metadata
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import dataset as ds
from .dataset import SpaceSpec
from .dynamics import GaussianEnsemble, TabularDynamicsModel, model_from_dict
from .envs import LinearRegulator, collect_continuous, evaluate_return, noisy_linear_policy
from .errors import ConfigError, InvalidInputError, VipoLabError
from .experiments import PLOTS, STUDIES, environment, quality_policy, run_study, study_config_from_dict, toy_dataset
from .mdp import TabularPolicy, optimal_policy, policy_return
from .oracle import GRAD_CHECK_COLUMNS, GradCheckSpec, grad_check
from .planner import GaussianActor, PlannerConfig, count_uncertainty, penalized_q, plan_actor_critic, plan_tabular
from .vipo import TrainConfig, _strict_config, train_vipo

ENV_PREFIX = "VIPOLAB_"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


# --- per-subcommand configs ---------------------------------------------------------


@dataclass
class CollectConfig:
    env: str = "chain"
    behavior_weight: float = 0.5
    n_episodes: int = 20
    horizon: int = 50
    behavior_gain: float = 0.5
    behavior_noise: float = 0.3

    def __post_init__(self):
        if self.env not in ("chain", "gridworld", "grid_embedded", "regulator"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.n_episodes < 0 or self.horizon < 1:
            raise ConfigError("need n_episodes >= 0 and horizon >= 1")
        if not 0.0 <= self.behavior_weight <= 1.0:
            raise ConfigError("behavior_weight must lie in [0, 1]")


@dataclass
class TabularPlanConfig:
    beta: float = 1.0
    gamma: float = 0.9
    uncertainty: str = "indicator"
    tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0 or self.beta < 0 or self.tol <= 0:
            raise ConfigError("need 0 <= gamma < 1, beta >= 0, tol > 0")
        if self.uncertainty not in ("indicator", "inverse_sqrt"):
            raise ConfigError("uncertainty must be 'indicator' or 'inverse_sqrt'")


@dataclass
class EvalConfig:
    env: str = "chain"
    n_episodes: int = 200
    horizon: int = 50

    def __post_init__(self):
        if self.env not in ("chain", "gridworld", "regulator"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.n_episodes < 1 or self.horizon < 1:
            raise ConfigError("n_episodes and horizon must be >= 1")


# --- config plumbing -------------------------------------------------------------------


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidInputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON ({exc.msg})") from None


def _env_overrides(keys) -> dict:
    out = {}
    for key in keys:
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is None:
            continue
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config_keys(cls) -> list:
    keys = [f.name for f in fields(cls)]
    return ["lambda" if k == "lam" else k for k in keys]


def resolve_config(cls, path, extra_keys=()) -> dict:
    """Defaults <- JSON file <- environment; unknown file keys are rejected by `cls`."""
    doc = {}
    if path is not None:
        doc = _read_json(path)
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    doc.update(_env_overrides(list(_config_keys(cls)) + list(extra_keys)))
    return doc


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("vipolab", "numpy", "scipy", "matplotlib"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _space_path(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + ".space.json")


def load_dataset(path):
    """JSON-lines dataset plus its `<stem>.space.json` sidecar when present."""
    side = _space_path(path)
    space = SpaceSpec(**_read_json(side)) if side.exists() else None
    if not Path(path).exists():
        raise InvalidInputError(f"no such file: {path}")
    return ds.load(path, space), ([side] if side.exists() else [])


def _save_dataset(data, out: Path) -> list:
    ds.save(data, out / "dataset.jsonl")
    _write_json(out / "dataset.space.json", asdict(data.space))
    return ["dataset.jsonl", "dataset.space.json"]


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --- subcommands ----------------------------------------------------------------------
# Each returns (config dict, inputs list, outputs list, exit status).


def cmd_collect(args, out: Path):
    cfg = _strict_config(CollectConfig, resolve_config(CollectConfig, args.config))
    if cfg.env == "regulator":
        env = LinearRegulator()
        policy = noisy_linear_policy(cfg.behavior_gain, cfg.behavior_noise, env.action_scale)
        data = collect_continuous(env, policy, cfg.n_episodes, cfg.horizon, args.seed)
    else:
        data = toy_dataset(cfg.env, cfg.behavior_weight, cfg.n_episodes, cfg.horizon, args.seed)
    return asdict(cfg), [], _save_dataset(data, out), EXIT_OK


def cmd_train_model(args, out: Path):
    doc = resolve_config(TrainConfig, args.config)
    doc["seed"] = args.seed
    cfg = TrainConfig.from_dict(doc)
    data, extra = load_dataset(args.dataset)
    inputs = [args.dataset, *extra]
    holdout = None
    if args.holdout:
        holdout, extra = load_dataset(args.holdout)
        inputs += [args.holdout, *extra]
    model, report = train_vipo(data, cfg, holdout)
    _write_json(out / "model.json", model.to_dict())
    report.to_csv(out / "train_curve.csv")
    _write_json(out / "train_notes.json", {"stop_reason": report.stop_reason, "notes": report.notes})
    return cfg.to_dict(), inputs, ["model.json", "train_curve.csv", "train_notes.json"], EXIT_OK


def cmd_plan(args, out: Path):
    model = model_from_dict(_read_json(args.model))
    data, extra = load_dataset(args.dataset)
    inputs = [args.model, args.dataset, *extra]
    if isinstance(model, TabularDynamicsModel):
        cfg = _strict_config(TabularPlanConfig, resolve_config(TabularPlanConfig, args.config))
        if data.space != SpaceSpec.tabular(model.n_states, model.n_actions):
            raise InvalidInputError("dataset space does not match the model")
        U = count_uncertainty(data, cfg.uncertainty)
        policy = plan_tabular(model, U, cfg.beta, cfg.gamma, cfg.tol)
        Q = penalized_q(model, U, cfg.beta, cfg.gamma, cfg.tol)
        _write_json(out / "policy.json", {"kind": "tabular_policy", **policy.to_dict()})
        rows = [(s, a, repr(float(Q[s, a])), repr(float(U[s, a])), repr(float(policy.probs[s, a])))
                for s in range(model.n_states) for a in range(model.n_actions)]
        _write_rows(out / "q_values.csv", ("state", "action", "q", "uncertainty", "prob"), rows)
        return asdict(cfg), inputs, ["policy.json", "q_values.csv"], EXIT_OK
    if not isinstance(model, GaussianEnsemble):
        raise InvalidInputError("unsupported model")
    doc = resolve_config(PlannerConfig, args.config)
    doc["seed"] = args.seed
    cfg = PlannerConfig.from_dict(doc)
    actor, report = plan_actor_critic(model, data, cfg)
    _write_json(out / "actor.json", actor.to_dict())
    report.to_csv(out / "curve.csv")
    return cfg.to_dict(), inputs, ["actor.json", "curve.csv"], EXIT_OK


def cmd_grad_check(args, out: Path):
    spec_path = args.spec or files("vipolab").joinpath("data/grad_check.json")
    doc = _read_json(spec_path)
    if not isinstance(doc, dict):
        raise ConfigError("grad-check spec must hold a JSON object")
    doc.update(_env_overrides(_config_keys(GradCheckSpec)))
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = GradCheckSpec.from_dict(doc)
    result = grad_check(spec)
    _write_rows(out / "grad_check.csv", GRAD_CHECK_COLUMNS,
                [[repr(r[c]) if isinstance(r[c], float) else r[c] for c in GRAD_CHECK_COLUMNS]
                 for r in result.coordinates])
    n_pass = sum(r["passed"] for r in result.instances)
    verdict = "PASS" if result.passed else "FAIL"
    print(f"grad-check {verdict}: {n_pass}/{len(result.instances)} instances within tolerance "
          f"{spec.tolerance:g}; max relative error {result.max_rel_error:.3e}")
    inputs = [args.spec] if args.spec else []
    return spec.to_dict(), inputs, ["grad_check.csv"], EXIT_OK if result.passed else EXIT_RUNTIME


def cmd_study(args, out: Path):
    if args.name not in STUDIES:
        raise ConfigError(f"unknown study {args.name!r}; choose from {sorted(STUDIES)}")
    # Keeps matplotlib's font cache inside --out.
    os.environ.setdefault("MPLCONFIGDIR", str(out / ".matplotlib"))
    doc = resolve_config(STUDIES[args.name], args.config)
    study = study_config_from_dict(args.name, doc)
    result = run_study(args.name, study, jobs=args.jobs)
    outputs = [f"{args.name}.csv", f"{args.name}_seeds.csv", "stats.json"]
    result.to_csv(out / outputs[0])
    result.seeds_to_csv(out / outputs[1])
    _write_json(out / "stats.json", {"stats": result.stats, "provenance": result.provenance})
    for metric, x_key, group_key in PLOTS[args.name]:
        name = f"{args.name}_{metric}.svg"
        result.to_svg(out / name, metric, x_key, group_key)
        outputs.append(name)
    return asdict(study), [args.config] if args.config else [], outputs, EXIT_OK


def cmd_eval(args, out: Path):
    cfg = _strict_config(EvalConfig, resolve_config(EvalConfig, args.config))
    doc = _read_json(args.policy)
    rows = []
    if doc.get("kind") == "gaussian_actor":
        if cfg.env != "regulator":
            raise InvalidInputError("actors are evaluated on the 'regulator' env")
        env = LinearRegulator()
        actor = GaussianActor.from_dict(doc)
        ret = evaluate_return(env, actor, cfg.n_episodes, cfg.horizon, args.seed)
        behavior = evaluate_return(env, noisy_linear_policy(0.5, 0.3, env.action_scale), cfg.n_episodes,
                                   cfg.horizon, args.seed, deterministic=False)
        rows = [("return", repr(ret)), ("behavior_return", repr(behavior))]
    elif doc.get("kind") == "tabular_policy":
        if cfg.env == "regulator":
            raise InvalidInputError("tabular policies are evaluated on 'chain' or 'gridworld'")
        mdp = environment(cfg.env)
        policy = TabularPolicy.from_dict(doc)
        if policy.probs.shape != (mdp.n_states, mdp.n_actions):
            raise InvalidInputError(f"policy shape {policy.probs.shape} does not fit env {cfg.env!r}")
        rows = [("return", repr(policy_return(mdp, policy))),
                ("optimal_return", repr(policy_return(mdp, optimal_policy(mdp)))),
                ("behavior_medium_return", repr(policy_return(mdp, quality_policy(mdp, 0.5))))]
    else:
        raise InvalidInputError(f"unknown policy kind {doc.get('kind')!r}")
    _write_rows(out / "eval.csv", ("metric", "value"), rows)
    return asdict(cfg), [args.policy], ["eval.csv"], EXIT_OK


COMMANDS = {"collect": cmd_collect, "train-model": cmd_train_model, "plan": cmd_plan,
            "grad-check": cmd_grad_check, "study": cmd_study, "eval": cmd_eval}


# --- parser -------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vipolab", description="Value-consistent model training and planning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, seed_default=0):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--jobs", type=int, default=1, help="worker processes (studies only)")
        p.add_argument("--config", help="JSON object merged over the defaults")
        return p

    add("collect", "roll a behaviour policy in a toy env and save the dataset")
    p = add("train-model", "train a dynamics model with the value-inconsistency penalty")
    p.add_argument("--dataset", required=True)
    p.add_argument("--holdout")
    p = add("plan", "plan against a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p = add("grad-check", "exact gradient vs finite differences on random tabular instances", None)
    p.add_argument("--spec", help="grad-check spec JSON (default: bundled)")
    p = add("study", "run a seeded study")
    p.add_argument("name", help=f"one of {', '.join(sorted(STUDIES))}")
    p = add("eval", "evaluate a saved policy in its true environment")
    p.add_argument("--policy", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    if args.jobs < 1:
        print("vipolab: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    start = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        config, inputs, outputs, status = COMMANDS[args.command](args, out)
    except InvalidInputError as exc:
        print(f"vipolab: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (VipoLabError, ArithmeticError, RuntimeError) as exc:
        print(f"vipolab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = {
        "subcommand": args.command,
        "config": config,
        "seed": config.get("seed", args.seed) if isinstance(config, dict) else args.seed,
        "jobs": args.jobs,
        "versions": _versions(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": outputs,
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "timing.json", {"wall_clock_s": time.perf_counter() - start})
    return status


if __name__ == "__main__":
    sys.exit(main())
