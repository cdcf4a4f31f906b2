"""Text renderings of trees, per-skill subtask ablations and episode skill traces."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import sdt
from .distill import HardTree, _episode_seeds, _names, run_episode
from .envsuite import N_TARGETS, SequentialReachEnv
from .errors import ContractError


def render_tree(tree, names=None):
    if isinstance(tree, HardTree):
        return tree.to_text(names)
    if not isinstance(tree, sdt.SoftTree):
        raise ContractError(f"cannot render {type(tree).__name__}")
    names = _names(names, tree.obs_dim)
    lines = []

    def walk(i, j):
        pad = "  " * i
        if i == tree.depth:
            p = sdt._softmax(tree.leaf_logits[j])
            k = int(np.argmax(p))
            lines.append(f"{pad}leaf {j} skill {k} p={p[k]:.3f}")
            return
        u = 2 ** i - 1 + j
        w = tree.weights[u]
        top = np.argsort(-np.abs(w), kind="stable")[:3]
        terms = " ".join(f"{w[f]:+.3f}*{names[f]}" for f in top)
        lines.append(f"{pad}node {u}: {terms} {tree.biases[u]:+.3f}")
        walk(i + 1, 2 * j)
        walk(i + 1, 2 * j + 1)

    walk(0, 0)
    return "\n".join(lines) + "\n"


@dataclass
class AblationRow:
    skill: int
    rates: np.ndarray   # success frequency per subtask
    episodes: int


def skill_ablation(skills, codebook, k, n_episodes, seed, env=None):
    """Force skill ``k`` at every decision and count how often each subtask gets done."""
    if not 0 <= k < len(codebook):
        raise ContractError(f"skill {k} outside [0, {len(codebook)})")
    env = env or SequentialReachEnv()
    hits = np.zeros(N_TARGETS)
    for s in _episode_seeds(n_episodes, seed):
        run_episode(env, skills, codebook, lambda obs: k, int(s))
        hits += np.asarray(env.state.flags, float)
    return AblationRow(k, hits / n_episodes, n_episodes)


def ablation_matrix(skills, codebook, n_episodes, seed, env=None):
    return [skill_ablation(skills, codebook, k, n_episodes, seed, env) for k in range(len(codebook))]


def ablation_csv(rows):
    buf = io.StringIO()
    buf.write("k,subtask,success_rate,episodes\n")
    for row in rows:
        for j, r in enumerate(row.rates):
            buf.write(f"{row.skill},{j},{float(r):.9g},{row.episodes}\n")
    return buf.getvalue()


@dataclass
class SkillTrace:
    steps: list = field(default_factory=list)        # env step of each decision
    skills: list = field(default_factory=list)
    path_probs: list = field(default_factory=list)
    completions: list = field(default_factory=list)  # (subtask, env step)

    @property
    def success(self):
        return len(self.completions) == N_TARGETS

    def longest_run(self):
        best = run = 0
        for i, k in enumerate(self.skills):
            run = run + 1 if i and k == self.skills[i - 1] else 1
            best = max(best, run)
        return best

    def to_csv(self):
        buf = io.StringIO()
        buf.write("t,k,path_prob\n")
        for t, k, p in zip(self.steps, self.skills, self.path_probs):
            buf.write(f"{t},{k},{float(p):.9g}\n")
        return buf.getvalue()

    def completions_csv(self):
        return "subtask,t\n" + "".join(f"{j},{t}\n" for j, t in self.completions)


def record_trace(policy, skills, codebook, seed, env=None):
    """One greedy episode with every decision and subtask completion logged."""
    env = env or SequentialReachEnv()
    trace = SkillTrace()
    log = []

    def choose(obs):
        path = sdt.greedy_path(policy, obs)
        trace.steps.append(env.state.t)
        trace.skills.append(path.skill)
        trace.path_probs.append(path.probability)
        return path.skill

    run_episode(env, skills, codebook, choose, seed, log=log)
    done = 0
    for t, (_, _, r, _) in enumerate(log):
        if r > 0:
            trace.completions.append((done, t + 1))
            done += 1
    return trace


def find_successful_trace(policy, skills, codebook, seed, tries=20, env=None):
    """First fully successful greedy episode among ``tries`` seeded resets (or the last one)."""
    trace = None
    for s in _episode_seeds(tries, seed):
        trace = record_trace(policy, skills, codebook, int(s), env)
        if trace.success:
            break
    return trace

