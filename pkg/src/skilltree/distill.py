"""Distil a soft skill policy into a shallow axis-aligned tree.

Greedy-path decisions of the soft policy are sampled in the environment,
optionally filtered to the better episodes, and fitted with a Gini CART whose
leaves name skill indices.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import sdt
from .envsuite import OBS_DIM, SequentialReachEnv, observe
from .errors import ContractError, EmptyAfterCleaning
from .hrltrain import rollout_skill


@dataclass
class HardNode:
    feature: int = -1
    threshold: float = 0.0
    left: "HardNode | None" = None
    right: "HardNode | None" = None
    skill: int = 0
    n: int = 0

    @property
    def is_leaf(self):
        return self.left is None


@dataclass
class HardTree:
    root: HardNode
    n_features: int = OBS_DIM

    def nodes(self):
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            yield node, d
            if not node.is_leaf:
                stack.append((node.right, d + 1))
                stack.append((node.left, d + 1))

    @property
    def depth(self):
        return max(d for _, d in self.nodes())

    @property
    def n_leaves(self):
        return sum(1 for n, _ in self.nodes() if n.is_leaf)

    def features_used(self):
        return sorted({n.feature for n, _ in self.nodes() if not n.is_leaf})

    def predict(self, states):
        x = np.atleast_2d(np.asarray(states, np.float64))
        if x.shape[1] != self.n_features:
            raise ContractError(f"states have {x.shape[1]} features, tree expects {self.n_features}")
        out = np.empty(len(x), np.int64)
        stack = [(self.root, np.arange(len(x)))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = node.skill
                continue
            go_left = x[idx, node.feature] < node.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def act(self, obs):
        return int(self.predict(obs)[0])

    def to_text(self, names=None):
        names = _names(names, self.n_features)
        lines = []
        for node, d in self.nodes():
            pad = "  " * d
            if node.is_leaf:
                lines.append(f"{pad}leaf {node.skill} {node.n}")
            else:
                lines.append(f"{pad}{names[node.feature]} < {node.threshold!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text, names=None, n_features=OBS_DIM):
        names = _names(names, n_features)
        lookup = {name: i for i, name in enumerate(names)}
        rows = [ln for ln in text.splitlines() if ln.strip()]
        pos = 0

        def build(depth):
            nonlocal pos
            if pos >= len(rows):
                raise ContractError("tree text ends early")
            line = rows[pos]
            indent = len(line) - len(line.lstrip(" "))
            if indent != 2 * depth:
                raise ContractError(f"bad indentation on line {pos + 1}")
            parts = line.split()
            pos += 1
            if parts[0] == "leaf":
                return HardNode(skill=int(parts[1]), n=int(parts[2]))
            if len(parts) != 3 or parts[1] != "<" or parts[0] not in lookup:
                raise ContractError(f"cannot parse line {pos}: {line.strip()!r}")
            node = HardNode(feature=lookup[parts[0]], threshold=float(parts[2]))
            node.left = build(depth + 1)
            node.right = build(depth + 1)
            return node

        root = build(0)
        if pos != len(rows):
            raise ContractError("trailing lines after tree")
        return cls(root, n_features)


def _names(names, n):
    names = list(names) if names is not None else [f"s{i}" for i in range(n)]
    if len(names) != n:
        raise ContractError(f"{len(names)} feature names for {n} features")
    return names


@dataclass
class LabelledSet:
    states: np.ndarray   # (N, obs_dim)
    skills: np.ndarray   # (N,)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.skills)

    def to_csv(self):
        buf = io.StringIO()
        d = self.states.shape[1]
        buf.write(",".join([f"s{i}" for i in range(d)] + ["k"]) + "\n")
        for s, k in zip(self.states, self.skills):
            buf.write(",".join([f"{float(v):.9g}" for v in s] + [str(int(k))]) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, meta=None):
        data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            return cls(np.zeros((0, OBS_DIM), np.float32), np.zeros(0, np.int64), meta or {})
        return cls(data[:, :-1].astype(np.float32), data[:, -1].astype(np.int64), meta or {})


@dataclass
class Episode:
    states: np.ndarray   # decision states
    skills: np.ndarray   # skill chosen at each decision
    subtasks: int
    steps: int


def run_episode(env, skills, codebook, choose, seed, log=None):
    """One episode where ``choose(obs)`` picks the skill at every decision."""
    env.reset(seed)
    states, ks = [], []
    steps = 0
    while not env.done:
        obs = observe(env.state)
        k = int(choose(obs))
        tr = rollout_skill(env, None, codebook, skills, None, log=log, skill=k)
        states.append(obs)
        ks.append(k)
        steps += tr.steps
    return Episode(np.array(states, np.float32), np.array(ks, np.int64), env.subtasks, steps)


def _episode_seeds(n, seed):
    return np.random.default_rng(seed).integers(2 ** 31, size=n)


def greedy_chooser(policy):
    return lambda obs: sdt.greedy_path(policy, obs).skill


def sample_labels(policy, codebook, skills, n_traj, seed, env=None):
    """Greedy-path rollouts of ``policy``; returns (episodes, flattened labels)."""
    if n_traj < 1:
        raise ContractError("n_traj must be at least 1")
    env = env or SequentialReachEnv()
    choose = greedy_chooser(policy)
    episodes = [run_episode(env, skills, codebook, choose, int(s)) for s in _episode_seeds(n_traj, seed)]
    return episodes, flatten(episodes, {"seed": seed, "n_traj": n_traj})


def flatten(episodes, meta=None):
    if not episodes:
        return LabelledSet(np.zeros((0, OBS_DIM), np.float32), np.zeros(0, np.int64), dict(meta or {}))
    return LabelledSet(np.concatenate([e.states for e in episodes]),
                       np.concatenate([e.skills for e in episodes]), dict(meta or {}))


def clean_dataset(episodes, min_subtasks):
    kept = [e for e in episodes if e.subtasks > min_subtasks]
    if not kept:
        raise EmptyAfterCleaning(f"no episode completed more than {min_subtasks} subtasks")
    return kept


def _impurity(counts):
    # n * gini = n - sum(c^2) / n, for every row of ``counts``
    n = counts.sum(axis=-1)
    return n - (counts ** 2).sum(axis=-1) / np.maximum(n, 1)


def best_split(x, y, n_classes, min_leaf=1):
    """Exhaustive Gini split search; returns (feature, threshold, weighted impurity) or None.

    Candidates are midpoints between consecutive distinct values. Ties go to the
    smallest feature index and then the smallest threshold.
    """
    n = len(y)
    onehot = np.eye(n_classes)[y]
    best = None
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        v = x[order, f]
        cum = np.cumsum(onehot[order], axis=0)
        # split after position i (left = [0..i])
        i = np.flatnonzero(v[1:] > v[:-1])
        i = i[(i + 1 >= min_leaf) & (n - i - 1 >= min_leaf)]
        if len(i) == 0:
            continue
        left = cum[i]
        right = cum[-1] - left
        score = _impurity(left) + _impurity(right)
        j = int(np.argmin(score))
        if best is None or score[j] < best[2] - 1e-9:
            best = (f, float((v[i[j]] + v[i[j] + 1]) / 2.0), float(score[j]))
    return best


def cart_fit(labels, max_depth, min_leaf=1, n_classes=None):
    if len(labels) == 0:
        raise ContractError("cannot fit a tree on an empty label set")
    if max_depth < 1 or min_leaf < 1:
        raise ContractError("max_depth and min_leaf must be at least 1")
    x = np.asarray(labels.states, np.float64)
    y = np.asarray(labels.skills, np.int64)
    if y.min() < 0:
        raise ContractError("skill indices must be non-negative")
    k = int(n_classes or y.max() + 1)

    def grow(idx, depth):
        counts = np.bincount(y[idx], minlength=k)
        node = HardNode(skill=int(np.argmax(counts)), n=len(idx))
        if depth >= max_depth or counts.max() == len(idx) or len(idx) < 2 * min_leaf:
            return node
        split = best_split(x[idx], y[idx], k, min_leaf)
        if split is None or split[2] >= _impurity(counts.astype(np.float64)) - 1e-9:
            return node
        f, thr, _ = split
        go_left = x[idx, f] < thr
        node.feature, node.threshold = f, thr
        node.left = grow(idx[go_left], depth + 1)
        node.right = grow(idx[~go_left], depth + 1)
        return node

    return HardTree(grow(np.arange(len(y)), 0), x.shape[1])


def accuracy(tree, labels):
    return float(np.mean(tree.predict(labels.states) == labels.skills))


def fidelity(hard, policy, states):
    states = np.atleast_2d(np.asarray(states, np.float32))
    if len(states) == 0:
        raise ContractError("need at least one state")
    ref, _ = sdt.greedy_skills(policy, states)
    return float(np.mean(hard.predict(states) == ref))


class RandomSkillActor:
    """Uniformly random skill at every decision (the unguided baseline)."""

    def __init__(self, n_skills, seed=0):
        self.n_skills = n_skills
        self.rng = np.random.default_rng(seed)

    def act(self, obs):
        return int(self.rng.integers(self.n_skills))


def chooser(actor):
    if isinstance(actor, sdt.SoftTree):
        return greedy_chooser(actor)
    if isinstance(actor, HardTree):
        return actor.act
    if hasattr(actor, "act"):
        return actor.act
    return actor


def evaluate_policy(actor, skills, codebook, n_episodes, seed, env=None):
    """Greedy control; returns (mean subtasks, std, per-episode counts)."""
    if n_episodes < 1:
        raise ContractError("n_episodes must be at least 1")
    env = env or SequentialReachEnv()
    choose = chooser(actor)
    counts = np.array([run_episode(env, skills, codebook, choose, int(s)).subtasks
                       for s in _episode_seeds(n_episodes, seed)], np.int64)
    return float(counts.mean()), float(counts.std()), counts
