"""Seeded studies over the toy environments.

Each study returns a `StudyResult` holding per-seed measurements, their
aggregates and a provenance block. Output is deterministic for a fixed seed
list: CSV floats are written with repr and SVG plots carry a fixed hash
salt and no timestamp.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binomtest, spearmanr

from .dataset import OfflineDataset, collect, embed, neighborhood_drop, split
from .dynamics import TabularDynamicsModel, max_aleatoric_uncertainty
from .errors import ConfigError, InvalidInputError
from .mdp import (GRID_MOVES, TabularPolicy, chain_mdp, grid_coordinates, gridworld, optimal_policy,
                  policy_return)
from .planner import count_uncertainty, plan_tabular
from .vipo import TrainConfig, _strict_config, train_nll, train_vipo

QUALITIES = {"random": 0.0, "medium": 0.5, "expert": 0.9}

# Toy-scale training defaults; the library defaults are sized for larger problems.
TOY_TRAIN = {
    "n_members": 5,
    "hidden": [32, 32],
    "max_outer_iters": 30,
    "batch_size": 128,
    "model_lr": 1e-3,
    "gamma": 0.9,
    "vm_inner_steps": 100,
    "vd_steps": 3000,
    "value_lr": 3e-3,
    "tau": 0.02,
}


def toy_train_config(overrides=None, **fields_) -> TrainConfig:
    """TOY_TRAIN merged with `overrides` (config-file keys) and keyword fields."""
    if "lam" in fields_:
        fields_["lambda"] = fields_.pop("lam")
    doc = {**TOY_TRAIN, **(overrides or {}), **fields_}
    return TrainConfig.from_dict(doc)


# --- datasets --------------------------------------------------------------------


def quality_policy(mdp, weight: float) -> TabularPolicy:
    """weight * optimal + (1 - weight) * uniform."""
    return optimal_policy(mdp).mix(TabularPolicy.uniform(mdp.n_states, mdp.n_actions), weight)


def environment(name: str):
    if name == "chain":
        return chain_mdp()
    if name == "gridworld":
        return gridworld()
    raise InvalidInputError(f"unknown environment {name!r}")


def toy_dataset(name: str, weight: float = 0.5, n_episodes: int = 20, horizon: int = 50,
                seed: int = 0) -> OfflineDataset:
    """"chain" (tabular), "gridworld" (tabular) or "grid_embedded" (cell
    coordinates and move vectors as continuous features)."""
    if name == "grid_embedded":
        mdp = gridworld()
        data = collect(mdp, quality_policy(mdp, weight), n_episodes, horizon, seed)
        return embed(data, grid_coordinates(5), np.asarray(GRID_MOVES, dtype=float))
    mdp = environment(name)
    return collect(mdp, quality_policy(mdp, weight), n_episodes, horizon, seed)


def heldout_mse(model, batch: OfflineDataset) -> float:
    """Mean squared error of predicted (s', r) against observed (s', r).

    Tabular predictions are the next-state distribution scored against the
    one-hot outcome, averaged over the S + 1 output coordinates.
    """
    if len(batch) == 0:
        raise InvalidInputError("held-out batch is empty")
    if isinstance(model, TabularDynamicsModel):
        p = model.probs[batch.s, batch.a]
        sq = np.sum((p - np.eye(model.n_states)[batch.s_next]) ** 2, axis=1)
        sq += (model.reward_table[batch.s, batch.a] - batch.r) ** 2
        return float(np.mean(sq) / (model.n_states + 1))
    return model.prediction_error(batch)


# --- results -------------------------------------------------------------------------


def _condition_key(condition: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in condition.items())


def content_hash(payload) -> str:
    """Git blob-style SHA-1 of a canonical JSON rendering (arrays as lists)."""
    def default(obj):
        if isinstance(obj, OfflineDataset):
            return {"s": obj.s.tolist(), "a": obj.a.tolist(), "r": obj.r.tolist(),
                    "s_next": obj.s_next.tolist(), "done": obj.done.tolist()}
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, np.generic):
            return obj.item()
        raise TypeError(f"cannot hash {type(obj).__name__}")
    body = json.dumps(payload, sort_keys=True, default=default).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass
class StudyResult:
    """Per-seed measurements plus aggregates. `rows` are
    (condition, metric, mean, std, n_seeds); std is the sample std (0 for one seed)."""

    name: str
    samples: list = field(default_factory=list)  # (condition dict, metric, seed, value)
    provenance: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def add(self, condition: dict, metric: str, seed: int, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise InvalidInputError(f"non-finite {metric} for {_condition_key(condition)}")
        self.samples.append((dict(condition), metric, int(seed), value))

    def values(self, metric: str, **condition) -> list:
        return [v for c, m, _, v in self.samples
                if m == metric and all(c.get(k) == val for k, val in condition.items())]

    @property
    def rows(self) -> list:
        groups = {}
        for cond, metric, _, value in self.samples:
            groups.setdefault((_condition_key(cond), metric), (cond, []))[1].append(value)
        out = []
        for (_, metric), (cond, vals) in groups.items():
            arr = np.asarray(vals)
            std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            out.append((cond, metric, float(arr.mean()), std, int(arr.size)))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["study", "condition", "metric", "mean", "std", "n_seeds"])
            for cond, metric, mean, std, n in self.rows:
                w.writerow([self.name, _condition_key(cond), metric, repr(mean), repr(std), n])

    def seeds_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["study", "condition", "metric", "seed", "value"])
            for cond, metric, seed, value in self.samples:
                w.writerow([self.name, _condition_key(cond), metric, seed, repr(value)])

    def to_svg(self, path, metric: str, x_key: str | None = None, group_key: str | None = None) -> None:
        """Line plot of mean +- std against numeric `x_key`, or a box plot of the
        per-seed values per condition."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        plt.rcParams["svg.hashsalt"] = "vipolab"
        fig, ax = plt.subplots(figsize=(6, 4))
        rows = [r for r in self.rows if r[1] == metric]
        if x_key is not None:
            groups = {}
            for cond, _, mean, std, _ in rows:
                label = str(cond.get(group_key, metric)) if group_key else metric
                groups.setdefault(label, []).append((float(cond[x_key]), mean, std))
            for label, pts in groups.items():
                pts.sort()
                x, y, e = (np.array(c) for c in zip(*pts))
                ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=label)
            ax.set_xlabel(x_key)
            ax.legend()
        else:
            labels = [_condition_key(c) for c, *_ in rows]
            data = [self.values(metric, **c) for c, *_ in rows]
            ax.boxplot(data)
            ax.set_xticks(range(1, len(labels) + 1), labels, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel(metric)
        ax.set_title(self.name)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _run_jobs(fn, jobs_args, jobs: int):
    if jobs <= 1:
        return [fn(*a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*jobs_args)))


# --- study configs --------------------------------------------------------------------


@dataclass
class ModelErrorStudy:
    n_seeds: int = 5
    lam: float = 0.35
    datasets: tuple = ("chain", "grid_embedded")
    behavior_weight: float = 0.5
    n_episodes: int = 20
    horizon: int = 50
    data_seed: int = 0
    split_ratio: float = 0.9
    warm_start: bool = True
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.datasets = tuple(self.datasets)
        if self.n_seeds < 2:
            raise ConfigError("the model-error study needs at least 2 seeds")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")


@dataclass
class SweepStudy:
    n_seeds: int = 4
    lam: float = 0.35
    drop_ratios: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    radius: float = 0.8
    n_anchors: int = 5
    dataset: str = "grid_embedded"
    behavior_weight: float = 0.5
    n_episodes: int = 20
    horizon: int = 50
    data_seed: int = 0
    warm_start: bool = True
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.drop_ratios = tuple(float(r) for r in self.drop_ratios)
        if list(self.drop_ratios) != sorted(self.drop_ratios):
            raise ConfigError("drop_ratios must be sorted ascending")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")


@dataclass
class BenchmarkStudy:
    n_seeds: int = 4
    lam: float = 0.35
    envs: tuple = ("chain", "gridworld")
    qualities: dict = field(default_factory=lambda: dict(QUALITIES))
    beta: float = 1.0
    uncertainty: str = "indicator"
    n_episodes: int = 50
    horizon: int = 50
    split_ratio: float = 0.9
    warm_start: bool = False
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.envs = tuple(self.envs)
        if self.n_seeds < 2:
            raise ConfigError("the benchmark study needs at least 2 seeds")


STUDIES = {"model_error": ModelErrorStudy, "uncertainty_sweep": SweepStudy, "benchmark": BenchmarkStudy}


def study_config_from_dict(name: str, doc: dict):
    if name not in STUDIES:
        raise ConfigError(f"unknown study {name!r}; choose from {sorted(STUDIES)}")
    cfg = _strict_config(STUDIES[name], doc, aliases={"lambda": "lam"})
    toy_train_config(cfg.train)  # reject bad training keys early
    return cfg


def _arm_configs(study, seed: int):
    return (toy_train_config(study.train, lam=study.lam, seed=seed),
            toy_train_config(study.train, lam=0.0, seed=seed))


def _train_arms(train_set, study, seed, holdout=None):
    vipo_cfg, nll_cfg = _arm_configs(study, seed)
    init = train_nll(train_set, nll_cfg, holdout)[0] if study.warm_start else None
    vipo_model, _ = train_vipo(train_set, vipo_cfg, holdout, init_model=init)
    nll_model, _ = train_vipo(train_set, nll_cfg, holdout, init_model=init)
    return vipo_model, nll_model


# --- studies -------------------------------------------------------------------------


def _model_error_job(study, name, seed):
    data = toy_dataset(name, study.behavior_weight, study.n_episodes, study.horizon, study.data_seed)
    train_set, valid = split(data, study.split_ratio, study.data_seed)
    vipo_model, nll_model = _train_arms(train_set, study, seed)
    return heldout_mse(vipo_model, valid), heldout_mse(nll_model, valid)


def sign_test(wins: int, losses: int) -> float:
    """One-sided exact sign test p-value for P(win) > 1/2; ties are dropped."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def study_model_error(study: ModelErrorStudy | None = None, jobs: int = 1) -> StudyResult:
    """Held-out MSE of the VIPO arm and the lambda = 0 arm on a shared split.

    Both arms share seeds, RNG streams and (with warm_start) an NLL-trained
    starting model; the validation split is never used for training or
    stopping. stats[dataset] holds wins, losses, ties and the sign-test p.
    """
    study = study or ModelErrorStudy()
    result = StudyResult("model_error")
    args = [(study, name, seed) for name in study.datasets for seed in range(study.n_seeds)]
    for (_, name, seed), (e_vipo, e_nll) in zip(args, _run_jobs(_model_error_job, args, jobs)):
        result.add({"dataset": name, "arm": "vipo"}, "heldout_mse", seed, e_vipo)
        result.add({"dataset": name, "arm": "lambda0"}, "heldout_mse", seed, e_nll)
    for name in study.datasets:
        v = np.array(result.values("heldout_mse", dataset=name, arm="vipo"))
        n = np.array(result.values("heldout_mse", dataset=name, arm="lambda0"))
        wins, losses = int(np.sum(v < n)), int(np.sum(v > n))
        result.stats[name] = {"wins": wins, "losses": losses, "ties": int(np.sum(v == n)),
                              "p_value": sign_test(wins, losses)}
    result.provenance = {"config": asdict(study), "seeds": list(range(study.n_seeds)),
                         "input_hash": content_hash(asdict(study))}
    return result


def _sweep_job(study, ratio, seed):
    data = toy_dataset(study.dataset, study.behavior_weight, study.n_episodes, study.horizon, study.data_seed)
    remaining, anchors, _ = neighborhood_drop(data, study.n_anchors, study.radius, ratio, seed)
    vipo_cfg, nll_cfg = _arm_configs(study, seed)
    init = train_nll(remaining, nll_cfg)[0] if study.warm_start else None
    model, _ = train_vipo(remaining, vipo_cfg, init_model=init)
    return float(np.mean(max_aleatoric_uncertainty(model, anchors.s, anchors.a)))


def study_uncertainty_sweep(study: SweepStudy | None = None, jobs: int = 1) -> StudyResult:
    """Mean max-aleatoric uncertainty on the anchor pairs as a growing share of
    their neighbourhood is removed. stats["spearman"] ranks drop ratio against
    the per-ratio mean over seeds."""
    study = study or SweepStudy()
    if study.dataset != "grid_embedded":
        raise InvalidInputError("the uncertainty sweep needs a continuous dataset")
    result = StudyResult("uncertainty_sweep")
    args = [(study, ratio, seed) for ratio in study.drop_ratios for seed in range(study.n_seeds)]
    for (_, ratio, seed), u in zip(args, _run_jobs(_sweep_job, args, jobs)):
        result.add({"drop_ratio": ratio}, "mean_max_aleatoric", seed, u)
    means = [np.mean(result.values("mean_max_aleatoric", drop_ratio=r)) for r in study.drop_ratios]
    rho = spearmanr(study.drop_ratios, means)[0] if len(set(means)) > 1 else float("nan")
    result.stats = {"spearman": float(rho), "per_ratio_mean": [float(m) for m in means]}
    result.provenance = {"config": asdict(study), "seeds": list(range(study.n_seeds)),
                         "input_hash": content_hash(asdict(study))}
    return result


def default_trainers(study: BenchmarkStudy):
    """arm -> trainer(train_set, holdout, seed) returning a tabular model."""
    def vipo(train_set, holdout, seed):
        return _train_arms(train_set, study, seed, holdout)[0]

    def nll(train_set, holdout, seed):
        return _train_arms(train_set, study, seed, holdout)[1]

    return {"vipo": vipo, "lambda0": nll}


def _benchmark_job(study, env_name, quality, seed, trainers=None):
    mdp = environment(env_name)
    behavior = quality_policy(mdp, study.qualities[quality])
    data = collect(mdp, behavior, study.n_episodes, study.horizon, seed)
    train_set, holdout = split(data, study.split_ratio, seed)
    U = count_uncertainty(train_set, study.uncertainty)
    out = {"behavior": policy_return(mdp, behavior), "optimal": policy_return(mdp, optimal_policy(mdp))}
    for arm, trainer in (trainers or default_trainers(study)).items():
        model = trainer(train_set, holdout, seed)
        out[arm] = policy_return(mdp, plan_tabular(model, U, study.beta, mdp.gamma))
    return out


def study_benchmark(study: BenchmarkStudy | None = None, jobs: int = 1, trainers=None) -> StudyResult:
    """True-environment return of model + pessimistic tabular planner for each
    environment, data quality and seed. Arms share data, planner and seeds;
    `trainers` (arm -> callable) overrides model training and forces jobs=1."""
    study = study or BenchmarkStudy()
    result = StudyResult("benchmark")
    args = [(study, env, q, seed) for env in study.envs for q in study.qualities
            for seed in range(study.n_seeds)]
    if trainers is not None:
        outs = [_benchmark_job(*a, trainers=trainers) for a in args]
    else:
        outs = _run_jobs(_benchmark_job, args, jobs)
    for (_, env, q, seed), out in zip(args, outs):
        for arm, ret in out.items():
            result.add({"env": env, "quality": q, "arm": arm}, "return", seed, ret)
    result.provenance = {"config": asdict(study), "seeds": list(range(study.n_seeds)),
                         "input_hash": content_hash(asdict(study))}
    return result


def run_study(name: str, study=None, jobs: int = 1) -> StudyResult:
    runner = {"model_error": study_model_error, "uncertainty_sweep": study_uncertainty_sweep,
              "benchmark": study_benchmark}[name]
    return runner(study, jobs=jobs)


PLOTS = {
    "model_error": [("heldout_mse", None, None)],
    "uncertainty_sweep": [("mean_max_aleatoric", "drop_ratio", None)],
    "benchmark": [("return", None, None)],
}
