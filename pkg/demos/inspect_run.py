"""Read the artifacts of a CLI run and walk through the decision paths of one episode.

    skilltree gen-data && skilltree train-skills && skilltree train-rl && skilltree distill
    python demos/inspect_run.py run/policy.ckpt
"""
import sys

import numpy as np

from skilltree import cli, envsuite, explain, sdt
from skilltree.checkpoint import Checkpoint
from skilltree.config import parse
from skilltree.distill import run_episode

path = sys.argv[1] if len(sys.argv) > 1 else "run/policy.ckpt"
ck = Checkpoint.load(path)
model = cli.skills_from(ck, parse(ck.config))
policy, codebook = cli.policy_from(ck)
print(f"{len(ck.sections)} sections, K={model.n_skills}, h={model.h}, alpha={np.exp(ck.sections['log_alpha'][0]):.4f}")
print(explain.render_tree(policy, envsuite.FEATURE_NAMES))

env = envsuite.SequentialReachEnv()
for seed in range(20):
    lines = []

    def choose(obs):
        p = sdt.greedy_path(policy, obs)
        route = " ".join(f"{u}{'L' if b == 'left' else 'R'}({q:.2f})" for u, b, q in zip(p.nodes, p.branches, p.probs))
        lines.append(f"t={env.state.t:3d} pos=({obs[0]:.2f},{obs[1]:.2f}) done={obs[2:5].astype(int)} "
                     f"-> skill {p.skill}  path {route}")
        return p.skill

    ep = run_episode(env, model, codebook, choose, seed)
    if ep.subtasks == envsuite.N_TARGETS:
        break
print(f"seed {seed}: {ep.subtasks} subtasks in {ep.steps} steps")
print("\n".join(lines))
