import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from skilltree import envsuite as E
from skilltree.errors import ContractError


def at(target, flags=(0, 0, 0), t=0):
    c = E.TARGETS[target]
    return E.EnvState((c[0], c[1]), flags, t)


def test_same_seed_same_reset():
    assert E.env_reset(7) == E.env_reset(7)
    assert E.env_reset(7) != E.env_reset(8)


def test_reset_bounds_and_flags():
    for s in range(1000):
        st_ = E.env_reset(s)
        assert all(0.4 <= v <= 0.6 for v in st_.pos)
        assert st_.flags == (0, 0, 0) and st_.t == 0


def test_in_order_touch_rewards():
    nxt, r, done, n = E.env_step(at(0), np.zeros(2))
    assert r == 1 and nxt.flags == (1, 0, 0) and n == 1 and not done


def test_out_of_order_touch_ignored():
    nxt, r, _, n = E.env_step(at(1), np.zeros(2))
    assert r == 0 and nxt.flags == (0, 0, 0) and n == 0


def test_touching_completed_target_again_pays_nothing():
    nxt, r, _, _ = E.env_step(at(0, (1, 0, 0)), np.zeros(2))
    assert r == 0 and nxt.flags == (1, 0, 0)


def test_last_target_ends_episode():
    nxt, r, done, n = E.env_step(at(2, (1, 1, 0)), np.zeros(2))
    assert r == 1 and done and n == 3


def test_horizon_ends_episode():
    state = E.env_reset(0)
    for _ in range(E.HORIZON):
        assert not state.done
        state, _, done, _ = E.env_step(state, np.zeros(2))
    assert done and state.t == E.HORIZON and state.subtasks == 0


def test_actions_are_clipped_and_position_clamped():
    s = E.EnvState((np.float32(0.99), np.float32(0.5)), (0, 0, 0))
    nxt, _, _, _ = E.env_step(s, np.array([3.0, -3.0]))
    assert nxt.pos[0] == np.float32(1.0)
    assert nxt.pos[1] == np.float32(0.5) - np.float32(0.05)


def test_observation_layout():
    obs = E.observe(E.env_reset(3))
    assert obs.shape == (11,) and obs.dtype == np.float32
    assert np.all((obs >= 0) & (obs <= 1))
    np.testing.assert_array_equal(obs[5:], np.float32([0.2, 0.8, 0.8, 0.8, 0.5, 0.2]))
    assert len(E.FEATURE_NAMES) == E.OBS_DIM


@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=60), st.integers(0, 2 ** 31))
def test_subtasks_monotone_and_rewards_bounded(actions, seed):
    state = E.env_reset(seed)
    total = 0.0
    last = 0
    for a in actions:
        state, r, done, n = E.env_step(state, np.array(a))
        assert r in (0.0, 1.0) and n >= last
        total += r
        last = n
        if done:
            break
    assert total == state.subtasks <= 3


def test_wrapper_requires_reset():
    with pytest.raises(ContractError):
        E.SequentialReachEnv().step(np.zeros(2))


def test_expert_saturates_far_from_target():
    expert = E.ScriptedExpert([1], noise=0)
    obs = E.observe(E.EnvState((np.float32(0.1), np.float32(0.79)), (0, 0, 0)))
    a = expert.act(obs, np.random.default_rng(0))
    np.testing.assert_allclose(a, [0.05, 0.01], atol=1e-6)


def test_expert_advances_inside_disc():
    expert = E.ScriptedExpert([0, 1], noise=0)
    expert.act(E.observe(at(0)), np.random.default_rng(0))
    assert expert.index == 1


def test_expert_rejects_empty_plan():
    with pytest.raises(ContractError):
        E.ScriptedExpert([])


def test_expert_reaches_two_target_plans():
    rng = np.random.default_rng(0)
    plans = [p for p in E.PLANS if len(p) == 2]
    ok = 0
    for i in range(100):
        plan = plans[i % len(plans)]
        tr = E.rollout_expert(plan, int(rng.integers(2 ** 31)))
        final = tr.final_state[:2]
        # both discs visited: the trajectory passes through each of them
        pts = np.vstack([tr.states[:, :2], final])
        ok += all(np.min(np.hypot(*(pts - E.TARGETS[j]).T)) <= E.RADIUS for j in plan)
    assert ok >= 99


def test_prefix_fraction_matches_enumeration():
    support = [p for n in (2, 3) for p in itertools.permutations(range(3), n)]
    expected = sum(p == (0, 1, 2)[: len(p)] for p in support) / len(support)
    assert expected == pytest.approx(1 / 6)
    assert E.prefix_plan_fraction() == pytest.approx(expected)


def test_dataset_shape_and_determinism(tmp_path):
    a = E.generate_dataset(40, seed=5, path=tmp_path / "a.csv")
    E.generate_dataset(40, seed=5, path=tmp_path / "b.csv")
    assert len(a) == 40 and all(1 <= len(t) <= E.HORIZON for t in a)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "traj,t," + ",".join(f"s{i}" for i in range(11)) + ",a0,a1,r,done"


def test_dataset_rejects_empty():
    with pytest.raises(ContractError):
        E.generate_dataset(0, seed=0)


def test_dataset_round_trip(tmp_path, small_data):
    E.save_dataset(small_data, tmp_path / "d.csv")
    back = E.load_dataset(tmp_path / "d.csv")
    assert len(back) == len(small_data)
    for x, y in zip(small_data, back):
        for f in ("states", "actions", "rewards", "dones", "final_state"):
            np.testing.assert_array_equal(getattr(x, f), getattr(y, f))


def test_replaying_actions_reproduces_states(small_data):
    for tr in small_data[:20]:
        state = E.state_from_obs(tr.states[0])
        for t in range(len(tr)):
            np.testing.assert_array_equal(E.observe(state), tr.states[t])
            state, r, _, _ = E.env_step(state, tr.actions[t])
            assert r == tr.rewards[t]
        np.testing.assert_array_equal(E.observe(state), tr.final_state)


def test_dataset_rewards_follow_order_rule(small_data):
    for tr in small_data:
        assert tr.subtasks in (0, 1, 2, 3)
        np.testing.assert_array_equal(np.cumsum(tr.rewards)[np.flatnonzero(tr.rewards)],
                                      np.arange(1, tr.subtasks + 1))


def test_discounted_return_bounded(small_data):
    g = 0.99 ** np.arange(E.HORIZON)
    assert max(float(np.sum(g[: len(t)] * t.rewards)) for t in small_data) <= 3
