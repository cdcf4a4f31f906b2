"""Downstream RL over the discrete skill space.

A soft-tree policy picks a skill index every ``h`` environment steps; the frozen
decoder turns the matching codebook row into actions. A critic Q(s, z) with a
Polyak-averaged target scores skills. The policy maximises
``sum_k pi(k|s) Q(s, Z[k]) - alpha * KL(pi(.|s) || prior(.|s))`` and ``alpha`` is
steered so the KL tracks a target value. The KL enters the critic target as a
penalty as well.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import sdt
from .envsuite import SequentialReachEnv, observe
from .errors import ContractError, NumericFault
from .nets import mlp_forward, mlp_graph, mlp_init
from .skillvq import low_level_action

METRIC_COLUMNS = ["iter", "env_steps", "mean_return", "mean_subtasks", "kl", "alpha", "policy_loss", "critic_loss"]


@dataclass(frozen=True)
class SkillTransition:
    state: np.ndarray
    skill: int
    embedding: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool
    steps: int = 0


class ReplayBuffer:
    """FIFO ring buffer of skill transitions stored column-wise."""

    def __init__(self, capacity, obs_dim, code_dim):
        if capacity < 1:
            raise ContractError("buffer capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, obs_dim), np.float32)
        self.skills = np.zeros(capacity, np.int64)
        self.embeddings = np.zeros((capacity, code_dim), np.float32)
        self.rewards = np.zeros(capacity, np.float32)
        self.next_states = np.zeros((capacity, obs_dim), np.float32)
        self.terminals = np.zeros(capacity, np.float32)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, tr):
        i = self.head
        self.states[i] = tr.state
        self.skills[i] = tr.skill
        self.embeddings[i] = tr.embedding
        self.rewards[i] = tr.reward
        self.next_states[i] = tr.next_state
        self.terminals[i] = float(tr.terminal)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n, rng):
        idx = rng.integers(self.size, size=n)
        return self.take(idx)

    def take(self, idx):
        return {"states": self.states[idx], "skills": self.skills[idx], "embeddings": self.embeddings[idx],
                "rewards": self.rewards[idx], "next_states": self.next_states[idx],
                "terminals": self.terminals[idx]}


@dataclass
class Critic:
    online: dict
    target: dict

    def q(self, states, z, which="online"):
        p = self.online if which == "online" else self.target
        return mlp_forward(p, np.concatenate([states, z], axis=1))[:, 0]


def init_critic(obs_dim, code_dim, hidden=128, seed=0):
    p = mlp_init([obs_dim + code_dim, hidden, hidden, 1], np.random.default_rng(seed))
    return Critic(p, {k: v.copy() for k, v in p.items()})


@dataclass
class AlphaController:
    log_alpha: float
    target_kl: float = 1.0
    lr: float = 3e-4
    low: float = 1e-6
    high: float = 1e6

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha))


def update_alpha(ctrl, observed_kl):
    """Raise alpha when the KL exceeds its target, lower it otherwise (log-space step, clamped)."""
    if observed_kl < 0:
        raise ContractError("observed KL must be non-negative")
    la = ctrl.log_alpha + ctrl.lr * (observed_kl - ctrl.target_kl)
    ctrl.log_alpha = float(np.clip(la, np.log(ctrl.low), np.log(ctrl.high)))
    return ctrl.alpha


def polyak_update(critic, tau):
    if not 0 < tau <= 1:
        raise ContractError("tau must lie in (0, 1]")
    for k, v in critic.online.items():
        t = critic.target[k]
        t *= np.float32(1 - tau)
        t += np.float32(tau) * v
    return critic


def choose_skill(policy, obs, rng=None, greedy=False):
    if greedy:
        return sdt.greedy_path(policy, obs).skill
    return sdt.sample_skill(policy, obs, rng)


def rollout_skill(env, policy, codebook, skills, rng, greedy=False, log=None, skill=None):
    """Run one high-level decision for up to ``skills.h`` steps; returns the aggregated transition."""
    if env.done:
        raise ContractError("environment episode already finished")
    obs = observe(env.state)
    k = choose_skill(policy, obs, rng, greedy) if skill is None else int(skill)
    z = codebook[k].copy()
    total = 0.0
    cur = obs
    steps = 0
    done = False
    for _ in range(skills.h):
        a = low_level_action(skills, cur, z)
        nxt, r, done, _ = env.step(a)
        if log is not None:
            log.append((cur, a, r, done))
        total += r
        cur = nxt
        steps += 1
        if done:
            break
    return SkillTransition(obs, k, z, total, cur, bool(done), steps)


def critic_target(batch, critic, policy, prior, codebook, alpha, gamma, rng):
    """Bootstrapped targets with a fresh skill sampled from the policy at the next state."""
    s2 = batch["next_states"]
    if s2.shape[1] != policy.obs_dim:
        raise ContractError("next-state dimension does not match the policy")
    pi2, _ = sdt.tree_forward(policy, s2)
    p2, _ = sdt.tree_forward(prior, s2)
    cum = np.cumsum(pi2.astype(np.float64), axis=1)
    u = rng.random((len(s2), 1)) * cum[:, -1:]
    k2 = np.minimum((u > cum).sum(axis=1), policy.n_skills - 1)
    q2 = critic.q(s2, codebook[k2], "target")
    kl2 = np.maximum(sdt.categorical_kl(pi2, p2), 0.0)
    boot = q2 - alpha * kl2
    return (batch["rewards"] + gamma * (1.0 - batch["terminals"]) * boot).astype(np.float32)


def policy_objective(pnodes, cb_node, critic_params, prior, states, alpha, policy):
    """Negated actor objective; returns ``(loss, mean_kl)`` Nodes."""
    b = states.shape[0]
    k = cb_node.shape[0]
    x = dc.const(states)
    pi = sdt.tree_graph(pnodes, x, policy)
    rows = dc.concat([dc.const(np.repeat(states, k, axis=0)), dc.gather(cb_node, np.tile(np.arange(k), b), axis=0)])
    q = dc.reshape(mlp_graph({n: dc.const(v) for n, v in critic_params.items()}, rows), (b, k))
    expected = dc.sum(dc.mul(pi, q), axis=1, keepdims=True)
    prior_p = dc.const(sdt.tree_forward(prior, states)[0])
    kl = sdt.kl_graph(pi, prior_p)
    loss = dc.mean(dc.sub(dc.scale(kl, alpha), expected))
    return loss, dc.mean(kl)


def update_policy(batch, policy, critic, prior, codebook, alpha, opt, codebook_opt=None):
    """One actor step; the critic is held fixed. The codebook moves only if ``codebook_opt`` is given."""
    pnodes = dc.params(policy.params())
    cb = dc.param(codebook) if codebook_opt is not None else dc.const(codebook)
    loss, kl = policy_objective(pnodes, cb, critic.online, prior, batch["states"], alpha, policy)
    if not np.isfinite(loss.value):
        raise NumericFault("non-finite policy loss")
    grads = dc.backward(loss)
    opt.step(policy.params(), dc.collect(pnodes, grads))
    if codebook_opt is not None:
        codebook_opt.step({"codebook": codebook}, {"codebook": grads[cb.id]})
    return float(loss.value), float(kl.value)


def critic_loss_graph(nodes, states, z, targets):
    q = mlp_graph(nodes, dc.const(np.concatenate([states, z], axis=1)))
    d = dc.sub(q, dc.const(targets[:, None]))
    return dc.scale(dc.mean(dc.mul(d, d)), 0.5)


def update_critic(batch, critic, targets, opt):
    nodes = dc.params(critic.online)
    loss = critic_loss_graph(nodes, batch["states"], batch["embeddings"], targets)
    if not np.isfinite(loss.value):
        raise NumericFault("non-finite critic loss")
    opt.step(critic.online, dc.collect(nodes, dc.backward(loss)))
    return float(loss.value)


@dataclass
class RLConfig:
    seed: int = 0
    env_steps: int = 200_000
    gamma: float = 0.99
    tau: float = 0.005
    target_kl: float = 1.0
    lr_policy: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    lr_codebook: float = 3e-5
    init_alpha: float = 0.1
    batch: int = 256
    buffer: int = 100_000
    collect_skills: int = 4
    grad_steps: int = 4
    warmup: int = 256
    hidden: int = 128
    log_every: int = 50


@dataclass
class RLResult:
    policy: sdt.SoftTree
    codebook: np.ndarray
    critic: Critic
    alpha: AlphaController
    metrics: list = field(default_factory=list)
    skipped_steps: int = 0


def train_rl(skills, config=None, max_grad_steps=None, rng=None):
    """Train the high-level policy; the decoder and prior in ``skills`` stay frozen."""
    cfg = config or RLConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    prior = skills.prior
    policy = prior.copy()
    codebook = skills.codebook.copy()
    critic = init_critic(prior.obs_dim, codebook.shape[1], cfg.hidden, rng.integers(2 ** 31))
    ctrl = AlphaController(float(np.log(cfg.init_alpha)), cfg.target_kl, cfg.lr_alpha)
    buf = ReplayBuffer(cfg.buffer, prior.obs_dim, codebook.shape[1])
    pol_opt = dc.Optimizer("adam", cfg.lr_policy)
    crit_opt = dc.Optimizer("adam", cfg.lr_critic)
    cb_opt = dc.Optimizer("adam", cfg.lr_codebook) if cfg.lr_codebook > 0 else None

    env = SequentialReachEnv()
    env.reset(int(rng.integers(2 ** 31)))
    ep_return, ep_stats = 0.0, []
    env_steps, grad_done, skipped, it = 0, 0, 0, 0
    window = {"kl": [], "policy_loss": [], "critic_loss": []}
    metrics = []
    limit = max_grad_steps if max_grad_steps is not None else float("inf")
    while env_steps < cfg.env_steps:
        for _ in range(cfg.collect_skills):
            tr = rollout_skill(env, policy, codebook, skills, rng)
            buf.add(tr)
            env_steps += tr.steps
            ep_return += tr.reward
            if tr.terminal:
                ep_stats.append((ep_return, env.subtasks))
                env.reset(int(rng.integers(2 ** 31)))
                ep_return = 0.0
        if len(buf) >= max(cfg.warmup, 1):
            for _ in range(cfg.grad_steps):
                if grad_done >= limit:
                    break
                batch = buf.sample(cfg.batch, rng)
                try:
                    targets = critic_target(batch, critic, policy, prior, codebook, ctrl.alpha, cfg.gamma, rng)
                    closs = update_critic(batch, critic, targets, crit_opt)
                    ploss, kl = update_policy(batch, policy, critic, prior, codebook, ctrl.alpha, pol_opt, cb_opt)
                except NumericFault:
                    skipped += 1
                    continue
                update_alpha(ctrl, max(kl, 0.0))
                polyak_update(critic, cfg.tau)
                window["kl"].append(kl)
                window["policy_loss"].append(ploss)
                window["critic_loss"].append(closs)
                grad_done += 1
        it += 1
        if it % cfg.log_every == 0 or env_steps >= cfg.env_steps:
            rets = [r for r, _ in ep_stats]
            subs = [s for _, s in ep_stats]
            metrics.append({
                "iter": it, "env_steps": env_steps,
                "mean_return": float(np.mean(rets)) if rets else float("nan"),
                "mean_subtasks": float(np.mean(subs)) if subs else float("nan"),
                "kl": _mean(window["kl"]), "alpha": ctrl.alpha,
                "policy_loss": _mean(window["policy_loss"]), "critic_loss": _mean(window["critic_loss"]),
            })
            ep_stats = []
            window = {k: [] for k in window}
    return RLResult(policy, codebook, critic, ctrl, metrics, skipped)


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["iter"], r["env_steps"]] + [f"{float(r[c]):.9g}" for c in METRIC_COLUMNS[2:]])
    return buf.getvalue()


def read_metrics(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{k: (int(v) if k in ("iter", "env_steps") else float(v)) for k, v in r.items()} for r in rows]
