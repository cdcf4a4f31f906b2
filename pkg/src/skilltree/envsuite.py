"""Sequential reach: a 2-D desk task with three discs that must be touched in order.

Reward is 1 the first time the next disc in the order 0 -> 1 -> 2 is touched and 0
otherwise; touching a disc out of order does nothing. Observations are
``(x, y, done0, done1, done2, cx0, cy0, cx1, cy1, cx2, cy2)``; the last six
entries never change.
"""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

TARGETS = np.array([[0.2, 0.8], [0.8, 0.8], [0.5, 0.2]], dtype=np.float32)
RADIUS = 0.08
MAX_STEP = 0.05
HORIZON = 200
N_TARGETS = 3
OBS_DIM = 2 + N_TARGETS + 2 * N_TARGETS
ACT_DIM = 2
FEATURE_NAMES = ["x", "y", "done0", "done1", "done2", "cx0", "cy0", "cx1", "cy1", "cx2", "cy2"]
CONSTANT_FEATURES = tuple(range(5, 11))

# every ordered plan of 2 or 3 distinct targets
PLANS = [p for n in (2, 3) for p in itertools.permutations(range(N_TARGETS), n)]


@dataclass(frozen=True)
class EnvState:
    pos: tuple      # float32 x, y
    flags: tuple    # 0/1 per target
    t: int = 0

    @property
    def subtasks(self):
        return sum(self.flags)

    @property
    def done(self):
        return self.subtasks == N_TARGETS or self.t >= HORIZON


def observe(state):
    return np.concatenate([np.asarray(state.pos, np.float32), np.asarray(state.flags, np.float32),
                           TARGETS.ravel()]).astype(np.float32)


def state_from_obs(obs, t=0):
    obs = np.asarray(obs, np.float32)
    return EnvState((obs[0], obs[1]), tuple(int(round(float(f))) for f in obs[2:5]), t)


def env_reset(seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.4, 0.6, size=2).astype(np.float32)
    return EnvState((pos[0], pos[1]), (0,) * N_TARGETS, 0)


def touching(pos, target):
    d = np.asarray(pos, np.float64) - TARGETS[target].astype(np.float64)
    return float(np.hypot(d[0], d[1])) <= RADIUS


def env_step(state, action):
    """Pure transition: returns (next_state, reward, done, subtasks)."""
    a = np.clip(np.asarray(action, np.float32), np.float32(-MAX_STEP), np.float32(MAX_STEP))
    pos = np.clip(np.asarray(state.pos, np.float32) + a, np.float32(0), np.float32(1))
    flags = list(state.flags)
    reward = 0.0
    nxt = state.subtasks
    if nxt < N_TARGETS and touching(pos, nxt):
        flags[nxt] = 1
        reward = 1.0
    new = EnvState((pos[0], pos[1]), tuple(flags), state.t + 1)
    return new, reward, new.done, new.subtasks


class SequentialReachEnv:
    """Stateful wrapper around :func:`env_reset` / :func:`env_step`."""

    obs_dim = OBS_DIM
    act_dim = ACT_DIM
    horizon = HORIZON

    def __init__(self):
        self.state = None

    def reset(self, seed):
        self.state = env_reset(seed)
        return observe(self.state)

    def step(self, action):
        if self.state is None:
            raise ContractError("reset() before step()")
        self.state, r, done, subtasks = env_step(self.state, action)
        return observe(self.state), r, done, subtasks

    @property
    def done(self):
        return self.state.done

    @property
    def subtasks(self):
        return self.state.subtasks


class ScriptedExpert:
    """Proportional pursuit of the targets in ``plan``, one after another."""

    def __init__(self, plan, noise=0.005, gain=1.0):
        if len(plan) == 0:
            raise ContractError("plan must not be empty")
        self.plan = list(plan)
        self.noise = noise
        self.gain = gain
        self.index = 0

    @property
    def finished(self):
        return self.index >= len(self.plan)

    def update(self, obs):
        while not self.finished and touching(obs[:2], self.plan[self.index]):
            self.index += 1

    def act(self, obs, rng):
        self.update(obs)
        if self.finished:
            return np.zeros(ACT_DIM, np.float32)
        delta = (TARGETS[self.plan[self.index]] - np.asarray(obs[:2], np.float32)) * np.float32(self.gain)
        a = np.clip(delta, -MAX_STEP, MAX_STEP)
        if self.noise > 0:
            a = a + rng.normal(0.0, self.noise, size=ACT_DIM)
        return np.clip(a, -MAX_STEP, MAX_STEP).astype(np.float32)


def scripted_expert(obs, expert, rng):
    return expert.act(obs, rng)


@dataclass
class Trajectory:
    states: np.ndarray    # (T, OBS_DIM)
    actions: np.ndarray   # (T, ACT_DIM)
    rewards: np.ndarray   # (T,)
    dones: np.ndarray     # (T,) bool
    final_state: np.ndarray

    def __len__(self):
        return len(self.actions)

    @property
    def subtasks(self):
        return int(round(float(self.rewards.sum())))


def rollout_expert(plan, seed, noise=0.005):
    rng = np.random.default_rng(seed)
    state = env_reset(rng.integers(2 ** 31))
    expert = ScriptedExpert(plan, noise)
    states, actions, rewards, dones = [], [], [], []
    obs = observe(state)
    while True:
        a = expert.act(obs, rng)
        state, r, done, _ = env_step(state, a)
        states.append(obs)
        actions.append(a)
        rewards.append(r)
        dones.append(done)
        obs = observe(state)
        expert.update(obs)
        if done or expert.finished:
            break
    return Trajectory(np.array(states, np.float32), np.array(actions, np.float32),
                      np.array(rewards, np.float32), np.array(dones, bool), obs)


def generate_dataset(n_traj, seed, path=None):
    """Expert demonstrations with uniformly random plans over ``PLANS``."""
    if n_traj < 1:
        raise ContractError("n_traj must be at least 1")
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n_traj):
        plan = PLANS[rng.integers(len(PLANS))]
        trajs.append(rollout_expert(plan, rng.integers(2 ** 31)))
    if path is not None:
        save_dataset(trajs, path)
    return trajs


def prefix_plan_fraction(order=(0, 1, 2)):
    """Share of the plan sampler's support that is a prefix of ``order``."""
    return sum(tuple(p) == tuple(order[: len(p)]) for p in PLANS) / len(PLANS)


def _fmt(v):
    return f"{float(v):.9g}"


def dataset_csv(trajs):
    buf = io.StringIO()
    cols = ["traj", "t"] + [f"s{i}" for i in range(OBS_DIM)] + [f"a{i}" for i in range(ACT_DIM)] + ["r", "done"]
    buf.write(",".join(cols) + "\n")
    for i, tr in enumerate(trajs):
        for t in range(len(tr)):
            row = [str(i), str(t)]
            row += [_fmt(v) for v in tr.states[t]]
            row += [_fmt(v) for v in tr.actions[t]]
            row += [_fmt(tr.rewards[t]), str(int(tr.dones[t]))]
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def save_dataset(trajs, path):
    Path(path).write_text(dataset_csv(trajs))


def load_dataset(path):
    """Read the CSV back; the final state of each trajectory is replayed through the environment."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    trajs = []
    if data.size == 0:
        return trajs
    ids = data[:, 0].astype(np.int64)
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    ends = np.r_[starts[1:], len(ids)]
    for s, e in zip(starts, ends):
        block = data[s:e]
        states = block[:, 2:2 + OBS_DIM].astype(np.float32)
        actions = block[:, 2 + OBS_DIM:2 + OBS_DIM + ACT_DIM].astype(np.float32)
        rewards = block[:, -2].astype(np.float32)
        dones = block[:, -1].astype(bool)
        last = state_from_obs(states[-1], t=int(block[-1, 1]))
        final, _, _, _ = env_step(last, actions[-1])
        trajs.append(Trajectory(states, actions, rewards, dones, observe(final)))
    return trajs
