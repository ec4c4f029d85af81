"""Offline transition datasets: collection, splitting, neighbourhood dropping
and JSON-lines persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import InvalidInputError, ParseError
from .mdp import TabularMdp, TabularPolicy


class Transition(NamedTuple):
    s: object
    a: object
    r: float
    s_next: object
    done: bool


@dataclass(frozen=True)
class SpaceSpec:
    """Discrete: sizes are counts of states/actions. Continuous: dimensions."""

    kind: str
    state_size: int
    action_size: int

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous"):
            raise InvalidInputError(f"unknown space kind {self.kind!r}")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    @classmethod
    def tabular(cls, n_states: int, n_actions: int) -> "SpaceSpec":
        return cls("discrete", n_states, n_actions)

    @classmethod
    def box(cls, state_dim: int, action_dim: int) -> "SpaceSpec":
        return cls("continuous", state_dim, action_dim)


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class OfflineDataset:
    """Immutable bag of (s, a, r, s', done) transitions.

    Discrete datasets hold integer index arrays of shape (n,); continuous ones
    hold float arrays of shape (n, dim). Subsets made with `subset` are new
    read-only arrays; nothing is ever modified in place.
    """

    def __init__(self, s, a, r, s_next, done, space: SpaceSpec):
        self.space = space
        if space.discrete:
            s = np.asarray(s, dtype=np.int64).reshape(-1)
            a = np.asarray(a, dtype=np.int64).reshape(-1)
            s_next = np.asarray(s_next, dtype=np.int64).reshape(-1)
        else:
            s = np.asarray(s, dtype=float).reshape(-1, space.state_size)
            a = np.asarray(a, dtype=float).reshape(-1, space.action_size)
            s_next = np.asarray(s_next, dtype=float).reshape(-1, space.state_size)
        r = np.asarray(r, dtype=float).reshape(-1)
        done = np.asarray(done, dtype=bool).reshape(-1)
        n = len(r)
        if not (len(s) == len(a) == len(s_next) == len(done) == n):
            raise InvalidInputError("transition fields have inconsistent lengths")
        if not np.all(np.isfinite(r)):
            raise InvalidInputError("rewards must be finite")
        if space.discrete and n:
            if s.min() < 0 or max(s.max(), s_next.max()) >= space.state_size:
                raise InvalidInputError("state index outside the declared space")
            if a.min() < 0 or a.max() >= space.action_size:
                raise InvalidInputError("action index outside the declared space")
        self.s, self.a, self.r = _readonly(s), _readonly(a), _readonly(r)
        self.s_next, self.done = _readonly(s_next), _readonly(done)

    @classmethod
    def empty(cls, space: SpaceSpec) -> "OfflineDataset":
        return cls([], [], [], [], [], space)

    @classmethod
    def from_transitions(cls, transitions, space: SpaceSpec) -> "OfflineDataset":
        transitions = list(transitions)
        if not transitions:
            return cls.empty(space)
        cols = list(zip(*transitions))
        return cls(*cols, space=space)

    def __len__(self) -> int:
        return len(self.r)

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Transition:
        if self.space.discrete:
            return Transition(int(self.s[i]), int(self.a[i]), float(self.r[i]),
                              int(self.s_next[i]), bool(self.done[i]))
        return Transition(self.s[i].copy(), self.a[i].copy(), float(self.r[i]),
                          self.s_next[i].copy(), bool(self.done[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (self.space == other.space and len(self) == len(other)
                and all(np.array_equal(x, y) for x, y in zip(self._fields(), other._fields())))

    def __repr__(self) -> str:
        return f"OfflineDataset(n={len(self)}, space={self.space})"

    def _fields(self):
        return self.s, self.a, self.r, self.s_next, self.done

    def subset(self, idx) -> "OfflineDataset":
        idx = np.asarray(idx)
        return OfflineDataset(*(f[idx] for f in self._fields()), space=self.space)

    def concat(self, other: "OfflineDataset") -> "OfflineDataset":
        if other.space != self.space:
            raise InvalidInputError("cannot concatenate datasets with different spaces")
        return OfflineDataset(*(np.concatenate([x, y]) for x, y in zip(self._fields(), other._fields())),
                              space=self.space)

    def state_action_features(self) -> np.ndarray:
        """(s, a) as float rows; discrete indices become 1-element vectors."""
        if self.space.discrete:
            return np.column_stack([self.s, self.a]).astype(float)
        return np.hstack([self.s, self.a])

    def minibatches(self, batch_size: int, rng: np.random.Generator) -> Iterator["OfflineDataset"]:
        order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start:start + batch_size])

    def sample(self, batch_size: int, rng: np.random.Generator) -> "OfflineDataset":
        return self.subset(rng.integers(0, len(self), size=batch_size))


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5 + 1e-9))


def collect(mdp: TabularMdp, policy: TabularPolicy, n_episodes: int, horizon: int,
            seed: int) -> OfflineDataset:
    """Roll `policy` in `mdp` for n_episodes episodes of `horizon` steps.

    Episodes start from rho0. The MDPs here are continuing tasks, so episode
    truncation is not termination and `done` is always False.
    """
    if n_episodes < 0 or horizon < 1:
        raise InvalidInputError("need n_episodes >= 0 and horizon >= 1")
    space = SpaceSpec.tabular(mdp.n_states, mdp.n_actions)
    if n_episodes == 0:
        return OfflineDataset.empty(space)
    rng = np.random.default_rng(seed)
    S = mdp.n_states
    cdf_T = np.cumsum(mdp.transition, axis=2)
    states = np.minimum((np.cumsum(mdp.rho0) < rng.random((n_episodes, 1))).sum(axis=1), S - 1)
    rows = {k: [] for k in ("s", "a", "r", "s_next")}
    for _ in range(horizon):
        actions = policy.act(states, rng)
        u = rng.random((n_episodes, 1))
        nxt = np.minimum((cdf_T[states, actions] < u).sum(axis=1), S - 1)
        rows["s"].append(states)
        rows["a"].append(actions)
        rows["r"].append(mdp.reward[states, actions])
        rows["s_next"].append(nxt)
        states = nxt
    # episode-major order: all steps of episode 0, then episode 1, ...
    stacked = {k: np.stack(v, axis=1).reshape(-1) for k, v in rows.items()}
    n = n_episodes * horizon
    return OfflineDataset(stacked["s"], stacked["a"], stacked["r"], stacked["s_next"],
                          np.zeros(n, dtype=bool), space)


def split(dataset: OfflineDataset, ratio: float, seed: int) -> tuple[OfflineDataset, OfflineDataset]:
    """Random disjoint partition; the first part holds round(ratio * n) items."""
    if not 0.0 < ratio < 1.0:
        raise InvalidInputError("ratio must lie strictly between 0 and 1")
    if len(dataset) == 0:
        raise InvalidInputError("cannot split an empty dataset")
    n = len(dataset)
    k = round_half_up(ratio * n)
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[:k])), dataset.subset(np.sort(order[k:]))


def neighborhood_candidates(features: np.ndarray, anchors: np.ndarray, radius: float) -> np.ndarray:
    """Boolean mask of rows lying within +-radius (elementwise) of any anchor."""
    mask = np.zeros(len(features), dtype=bool)
    for anchor in anchors:
        mask |= np.all(np.abs(features - anchor) <= radius, axis=1)
    return mask


def neighborhood_drop(dataset: OfflineDataset, n_anchors: int, radius: float = 0.8,
                      drop_ratio: float = 0.0, seed: int = 0):
    """Remove a fraction of the transitions clustered around random anchors.

    Returns (remaining dataset, anchor transitions, number of candidates).
    Anchors are ordinary candidates and can be dropped. For a fixed seed the
    anchors and the drop order do not depend on drop_ratio, so the removed
    sets are nested as the ratio grows.
    """
    if not 0.0 <= drop_ratio <= 1.0:
        raise InvalidInputError("drop_ratio must lie in [0, 1]")
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    if n_anchors > len(dataset) or n_anchors < 0:
        raise InvalidInputError(f"cannot choose {n_anchors} anchors from {len(dataset)} transitions")
    rng = np.random.default_rng(seed)
    anchor_idx = np.sort(rng.choice(len(dataset), size=n_anchors, replace=False))
    feats = dataset.state_action_features()
    cand = np.flatnonzero(neighborhood_candidates(feats, feats[anchor_idx], radius))
    drop_order = rng.permutation(cand)
    n_drop = round_half_up(drop_ratio * len(cand))
    keep = np.ones(len(dataset), dtype=bool)
    keep[drop_order[:n_drop]] = False
    return dataset.subset(np.flatnonzero(keep)), dataset.subset(anchor_idx), len(cand)


def visit_counts(dataset: OfflineDataset) -> np.ndarray:
    """(S, A) visitation counts of a discrete dataset."""
    if not dataset.space.discrete:
        raise InvalidInputError("visit counts need a discrete dataset")
    S, A = dataset.space.state_size, dataset.space.action_size
    return np.bincount(dataset.s * A + dataset.a, minlength=S * A).reshape(S, A).astype(float)


def estimate_behavior_policy(dataset: OfflineDataset) -> TabularPolicy:
    """Count-based behaviour cloning; unvisited states get the uniform row."""
    counts = visit_counts(dataset)
    totals = counts.sum(axis=1, keepdims=True)
    A = counts.shape[1]
    probs = np.where(totals > 0, counts / np.maximum(totals, 1.0), 1.0 / A)
    return TabularPolicy(probs)


# --- persistence ----------------------------------------------------------

_KEYS = ("s", "a", "r", "s_next", "done")


def _to_json_value(x):
    return x.tolist() if isinstance(x, np.ndarray) else x


def save(dataset: OfflineDataset, path) -> None:
    """JSON lines, one transition per line: {s, a, r, s_next, done}."""
    with open(path, "w") as fh:
        for t in dataset:
            fh.write(json.dumps({k: _to_json_value(v) for k, v in zip(_KEYS, t)}) + "\n")


def load(path, space: SpaceSpec | None = None) -> OfflineDataset:
    """Read a JSON-lines dataset.

    Without `space`, integer states mean a discrete dataset sized by the
    largest index seen; list-valued states mean a continuous one.
    """
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(doc, dict):
            raise ParseError("expected a JSON object", lineno)
        missing = [k for k in _KEYS if k not in doc]
        if missing:
            raise ParseError(f"missing key(s) {missing}", lineno)
        r = doc["r"]
        if isinstance(r, bool) or not isinstance(r, (int, float)):
            raise ParseError("reward 'r' must be a number", lineno)
        rows.append(tuple(doc[k] for k in _KEYS))
    if space is None:
        if not rows:
            space = SpaceSpec.tabular(1, 1)
        elif isinstance(rows[0][0], list):
            space = SpaceSpec.box(len(rows[0][0]), len(rows[0][1]))
        else:
            n_states = 1 + max(max(int(t[0]), int(t[3])) for t in rows)
            n_actions = 1 + max(int(t[1]) for t in rows)
            space = SpaceSpec.tabular(n_states, n_actions)
    if not rows:
        return OfflineDataset.empty(space)
    try:
        return OfflineDataset.from_transitions(rows, space)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"inconsistent transition arity: {exc}") from None


def embed(dataset: OfflineDataset, state_embedding, action_embedding) -> OfflineDataset:
    """Map a discrete dataset to continuous features via lookup tables."""
    if not dataset.space.discrete:
        raise InvalidInputError("only discrete datasets can be embedded")
    S_emb = np.asarray(state_embedding, dtype=float)
    A_emb = np.asarray(action_embedding, dtype=float)
    space = SpaceSpec.box(S_emb.shape[1], A_emb.shape[1])
    return OfflineDataset(S_emb[dataset.s], A_emb[dataset.a], dataset.r, S_emb[dataset.s_next],
                          dataset.done, space)
