"""Small end-to-end run: demonstrations, skills, a short RL phase, and a distilled tree.

Everything is scaled down so it finishes in a couple of minutes on one core.
The numbers it prints are not the full-scale results.
"""
import numpy as np

from skilltree import distill, envsuite, explain, hrltrain
from skilltree.skillvq import train_skills

trajs = envsuite.generate_dataset(150, seed=0)
lengths = [len(t) for t in trajs]
print(f"{len(trajs)} demonstrations, {min(lengths)}-{max(lengths)} steps each")

model, history = train_skills(trajs, n_skills=8, code_dim=8, epochs=10, hidden=64, depth=3, seed=0)
last = history[-1]
print(f"skills: held-out mse {last['heldout_mse']:.2e}, prior agreement {last['heldout_agreement']:.2f}, "
      f"{last['codes_used']} codes in use")

cfg = hrltrain.RLConfig(env_steps=20_000, hidden=64, log_every=25)
res = hrltrain.train_rl(model, cfg)
for row in res.metrics[::4]:
    # nan means no episode finished (or no update ran) in that window
    print(f"  steps {row['env_steps']:6d}  subtasks {row['mean_subtasks']:5.2f}  kl {row['kl']:6.3f}  "
          f"alpha {row['alpha']:.4f}")

eps, labels = distill.sample_labels(res.policy, res.codebook, model, 200, seed=1)
tree = distill.cart_fit(labels, max_depth=4, n_classes=model.n_skills)
print(explain.render_tree(tree, envsuite.FEATURE_NAMES))

for name, actor in [("soft", res.policy), ("hard", tree), ("random", distill.RandomSkillActor(8, 0))]:
    mean, std, _ = distill.evaluate_policy(actor, model, res.codebook, 30, seed=7)
    print(f"{name:>6}: {mean:.2f} +- {std:.2f} subtasks")

print("fidelity on fresh states:",
      round(distill.fidelity(tree, res.policy, distill.sample_labels(res.policy, res.codebook, model, 50, 9)[1].states), 3))
print("constant features used:", sorted(set(tree.features_used()) & set(envsuite.CONSTANT_FEATURES)) or "none")
