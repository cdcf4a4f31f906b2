"""Command line pipeline: gen-data, train-skills, train-rl, distill, eval, explain.

Every command reads an optional ``--config`` file; any config key can also be
given as ``--key value`` and wins over the file. Exit codes: 0 ok, 1 bad
config or arguments, 2 file or checkpoint problem, 3 numeric fault.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import distill, envsuite, explain, hrltrain, sdt
from .checkpoint import Checkpoint
from .errors import CheckpointError, ConfigError, ContractError, EmptyAfterCleaning, NumericFault
from .hrltrain import RLConfig
from .skillvq import SkillModel, train_skills

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def blob_hash(data):
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class Run:
    def __init__(self, name, cfg, seed):
        self.name, self.cfg, self.seed = name, cfg, seed
        self.out = Path(cfg.out_dir)
        self.inputs, self.outputs = {}, {}

    def read(self, path):
        data = Path(path).read_bytes()
        self.inputs[str(path)] = blob_hash(data)
        return data

    def write(self, path, data):
        if isinstance(data, str):
            data = data.encode()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.outputs[str(path)] = blob_hash(data)
        return path

    def manifest(self):
        doc = {"command": self.name, "config_hash": self.cfg.digest(), "seed": self.seed,
               "inputs": self.inputs, "outputs": self.outputs}
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / f"{self.name}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _rng_state(rng):
    return rng.bit_generator.state


def load_checkpoint(run, path):
    ck = Checkpoint.from_bytes(_read_input(run, path))
    return ck, cfgmod.parse(ck.config)


def _read_input(run, path):
    try:
        return run.read(path)
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e.strerror}", "file") from None


def skills_from(ck, snap):
    ck.require("enc", "dec", "codebook", "prior")
    p = {k: v for k, v in ck.sections.items() if k.split(".")[0] in ("enc", "dec", "codebook", "prior")}
    return SkillModel.from_params(p, int(snap.get("h", 10)))


def policy_from(ck):
    ck.require("policy", "policy_codebook")
    return sdt.SoftTree.from_params(ck.group("policy")), ck.sections["policy_codebook"].copy()


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    run = Run("gen-data", cfg, cfg.data_seed)
    out = args.out or cfg.data
    trajs = envsuite.generate_dataset(cfg.n_traj, cfg.data_seed)
    run.write(out, envsuite.dataset_csv(trajs))
    run.manifest()
    print(f"wrote {len(trajs)} trajectories to {out}")


def cmd_train_skills(args, cfg):
    run = Run("train-skills", cfg, cfg.skill_seed)
    path = args.data or cfg.data
    _read_input(run, path)
    trajs = envsuite.load_dataset(path)
    rng = np.random.default_rng(cfg.skill_seed)
    model, history = train_skills(
        trajs, h=cfg.h, n_skills=cfg.K, code_dim=cfg.D, beta=cfg.beta, epochs=cfg.epochs, batch=cfg.batch,
        lr=cfg.lr, depth=cfg.prior_depth, hidden=cfg.hidden, holdout=cfg.holdout, prior_lr=cfg.prior_lr,
        codebook_lr=cfg.codebook_lr, rng=rng)
    ck = Checkpoint(model.arrays(), cfg.to_text(), _rng_state(rng))
    run.write(args.out or run.out / "skills.ckpt", ck.to_bytes())
    run.write(run.out / "skills_history.csv", _rows_csv(history))
    run.manifest()
    last = history[-1] if history else {}
    print("skills trained: heldout_mse={:.3g} agreement={:.3f}".format(
        last.get("heldout_mse", float("nan")), last.get("heldout_agreement", float("nan"))))


def cmd_train_rl(args, cfg):
    run = Run("train-rl", cfg, cfg.rl_seed)
    ck, snap = load_checkpoint(run, args.skills or run.out / "skills.ckpt")
    model = skills_from(ck, snap)
    rl = RLConfig(seed=cfg.rl_seed, env_steps=cfg.env_steps, gamma=cfg.gamma, tau=cfg.tau, target_kl=cfg.delta,
                  lr_policy=cfg.lr_policy, lr_critic=cfg.lr_critic, lr_alpha=cfg.lr_alpha,
                  lr_codebook=cfg.lr_codebook, init_alpha=cfg.init_alpha, batch=cfg.rl_batch, buffer=cfg.buffer,
                  collect_skills=cfg.collect_skills, grad_steps=cfg.grad_steps, warmup=cfg.warmup,
                  hidden=cfg.hidden, log_every=cfg.log_every)
    rng = np.random.default_rng(cfg.rl_seed)
    res = hrltrain.train_rl(model, rl, rng=rng)
    sections = dict(ck.sections)
    sections.update({f"policy.{k}": v for k, v in res.policy.arrays().items()})
    sections["policy_codebook"] = res.codebook
    sections.update({f"critic.{k}": v for k, v in res.critic.online.items()})
    sections.update({f"target.{k}": v for k, v in res.critic.target.items()})
    sections["log_alpha"] = np.array([res.alpha.log_alpha], np.float32)
    out = Checkpoint(sections, cfg.to_text(), _rng_state(rng))
    run.write(args.out or run.out / "policy.ckpt", out.to_bytes())
    run.write(run.out / "rl_metrics.csv", hrltrain.metrics_csv(res.metrics))
    run.manifest()
    last = res.metrics[-1] if res.metrics else {}
    print(f"policy trained: subtasks={last.get('mean_subtasks', float('nan')):.3f} "
          f"kl={last.get('kl', float('nan')):.3f} alpha={res.alpha.alpha:.4g} skipped={res.skipped_steps}")


def cmd_distill(args, cfg):
    run = Run("distill", cfg, cfg.distill_seed)
    ck, snap = load_checkpoint(run, args.policy or run.out / "policy.ckpt")
    model = skills_from(ck, snap)
    policy, codebook = policy_from(ck)
    episodes, labels = distill.sample_labels(policy, codebook, model, cfg.distill_traj, cfg.distill_seed)
    kept = distill.clean_dataset(episodes, cfg.clean_threshold)
    train = distill.flatten(kept, {"seed": cfg.distill_seed, "clean_threshold": cfg.clean_threshold})
    tree = distill.cart_fit(train, cfg.distill_depth, cfg.min_leaf, n_classes=model.n_skills)
    run.write(args.out or run.out / "hard_tree.txt", tree.to_text(envsuite.FEATURE_NAMES))
    run.write(run.out / "labels.csv", train.to_csv())
    fid = distill.fidelity(tree, policy, labels.states)
    report = (f"fidelity,train_accuracy,leaves,depth,retained\n"
              f"{fid:.9g},{distill.accuracy(tree, train):.9g},{tree.n_leaves},{tree.depth},"
              f"{len(kept) / len(episodes):.9g}\n")
    run.write(run.out / "distill_report.csv", report)
    run.manifest()
    print(f"distilled tree: {tree.n_leaves} leaves, depth {tree.depth}, fidelity {fid:.3f}")


def _actor(args, cfg, run, model, policy):
    if args.actor == "soft":
        return policy
    if args.actor == "hard":
        path = args.tree or run.out / "hard_tree.txt"
        return distill.HardTree.parse(_read_input(run, path).decode(), envsuite.FEATURE_NAMES)
    return distill.RandomSkillActor(model.n_skills, cfg.eval_seed)


def cmd_eval(args, cfg):
    run = Run(f"eval-{args.actor}", cfg, cfg.eval_seed)
    ck, snap = load_checkpoint(run, args.policy or run.out / "policy.ckpt")
    model = skills_from(ck, snap)
    policy, codebook = policy_from(ck)
    actor = _actor(args, cfg, run, model, policy)
    mean, std, counts = distill.evaluate_policy(actor, model, codebook, cfg.eval_episodes, cfg.eval_seed)
    run.write(run.out / f"eval_{args.actor}.csv",
              "episode,subtasks\n" + "".join(f"{i},{c}\n" for i, c in enumerate(counts)))
    run.manifest()
    print(f"actor={args.actor} ACS={mean:.3f} std={std:.3f} episodes={len(counts)}")


def cmd_explain(args, cfg):
    run = Run("explain", cfg, cfg.explain_seed)
    ck, snap = load_checkpoint(run, args.policy or run.out / "policy.ckpt")
    model = skills_from(ck, snap)
    policy, codebook = policy_from(ck)
    rows = explain.ablation_matrix(model, codebook, cfg.ablation_episodes, cfg.explain_seed)
    run.write(run.out / "ablation.csv", explain.ablation_csv(rows))
    trace = explain.find_successful_trace(policy, model, codebook, cfg.explain_seed)
    run.write(run.out / "trace.csv", trace.to_csv())
    run.write(run.out / "trace_subtasks.csv", trace.completions_csv())
    run.write(run.out / "soft_tree.txt", explain.render_tree(policy, envsuite.FEATURE_NAMES))
    tree_path = Path(args.tree or run.out / "hard_tree.txt")
    if tree_path.exists():
        tree = distill.HardTree.parse(_read_input(run, tree_path).decode(), envsuite.FEATURE_NAMES)
        print(explain.render_tree(tree, envsuite.FEATURE_NAMES), end="")
    run.manifest()
    print(f"trace: {len(trace.skills)} decisions, {len(trace.completions)} subtasks, "
          f"longest repeat {trace.longest_run()}")


def _rows_csv(rows):
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(str(r[k]) if isinstance(r[k], int) else f"{float(r[k]):.9g}" for k in keys))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- parsing

def build_parser():
    p = argparse.ArgumentParser(prog="skilltree", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value file")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write scripted demonstrations")
    sp.add_argument("--n", type=int, dest="n_traj")
    sp.add_argument("--seed", type=int, dest="data_seed")
    sp.add_argument("--out")
    sp = add("train-skills", cmd_train_skills, "fit encoder, codebook, decoder and prior")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp = add("train-rl", cmd_train_rl, "train the soft-tree policy over skills")
    sp.add_argument("--skills")
    sp.add_argument("--out")
    sp = add("distill", cmd_distill, "fit a hard tree to the policy's choices")
    sp.add_argument("--policy")
    sp.add_argument("--out")
    sp = add("eval", cmd_eval, "average completed subtasks of an actor")
    sp.add_argument("--policy")
    sp.add_argument("--tree")
    sp.add_argument("--actor", choices=["soft", "hard", "random"], default="soft")
    sp = add("explain", cmd_explain, "ablation matrix, skill trace and tree renderings")
    sp.add_argument("--policy")
    sp.add_argument("--tree")
    return p


def _overrides(extra):
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            key, value = tok[2:], extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        overrides = _overrides(extra)
        for key in ("n_traj", "data_seed"):
            if getattr(args, key, None) is not None:
                overrides[key] = getattr(args, key)
        cfg = cfgmod.load(args.config, overrides)
        args.fn(args, cfg)
    except (ConfigError, ContractError, EmptyAfterCleaning) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericFault as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
