import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from icrl.envs import (
    DOWN,
    LEFT,
    RIGHT,
    STAY,
    UP,
    Darkroom,
    DarkroomSpec,
    TrialSpec,
    VectorDarkroom,
    oracle_action,
    read_trajectory,
    render_pixel,
    reset_trial,
    vector_step,
    write_trajectory,
)


def env_at(pos, goal, seed=0, **spec):
    e = Darkroom(TrialSpec(task_seed=seed, env=DarkroomSpec(**spec)))
    e.pos, e.goal = tuple(pos), tuple(goal)
    return e


def oracle_episode_return(start, goal, horizon=100):
    e = env_at(start, goal, horizon=horizon)
    total = 0.0
    for _ in range(horizon):
        total += e.step(oracle_action(e.pos, e.goal)).reward
    return total


def test_reset_is_deterministic():
    a, oa = reset_trial(TrialSpec(task_seed=42))
    b, ob = reset_trial(TrialSpec(task_seed=42))
    assert a.goal == b.goal and a.pos == b.pos and np.array_equal(oa, ob)
    assert a.episode_index == 0 and a.t == 0


def test_goal_uniform_over_cells():
    counts = np.zeros(100)
    for s in range(10_000):
        gx, gy = Darkroom(TrialSpec(task_seed=s)).goal
        counts[gx * 10 + gy] += 1
    chi2 = ((counts - 100) ** 2 / 100).sum()
    assert stats.chi2.sf(chi2, df=99) > 1e-3


def test_state_observation_normalized():
    e = env_at((9, 0), (5, 5))
    assert e.observe().tolist() == pytest.approx([1.0, 0.0])
    e.pos = (3, 6)
    assert e.observe().tolist() == pytest.approx([3 / 9, 6 / 9])


def test_move_up_and_reward():
    e = env_at((4, 4), (4, 5))
    r = e.step(UP)
    assert e.pos == (4, 5) and r.reward == 1.0
    e = env_at((4, 4), (7, 7))
    r = e.step(UP)
    assert e.pos == (4, 5) and r.reward == 0.0


@pytest.mark.parametrize(
    "pos,action,want",
    [((0, 0), LEFT, (0, 0)), ((0, 0), DOWN, (0, 0)), ((9, 9), UP, (9, 9)), ((9, 9), RIGHT, (9, 9)), ((3, 3), DOWN, (3, 2))],
)
def test_moves_are_clamped(pos, action, want):
    e = env_at(pos, (5, 5))
    e.step(action)
    assert e.pos == want


@pytest.mark.parametrize("k", [0, 1, 37, 99])
def test_stay_on_goal_from_step_k(k):
    e = env_at((2, 2), (6, 1))
    for _ in range(k):
        e.step(STAY)
    e.pos = e.goal
    total = 0.0
    for _ in range(100 - k):
        total += e.step(STAY).reward
    assert total == 100 - k


@pytest.mark.parametrize("bad", [-1, 5, 2.5, "up"])
def test_invalid_action_rejected(bad):
    with pytest.raises(ValueError):
        env_at((1, 1), (2, 2)).step(bad)


def test_done_at_horizon_and_auto_reset():
    trial = TrialSpec(task_seed=3, env=DarkroomSpec(horizon=7))
    e = Darkroom(trial)
    goal = e.goal
    starts = [e.pos]
    for ep in range(4):
        for t in range(1, 8):
            r = e.step(STAY)
            assert r.done == (t == 7) and r.step == t and r.episode_index == ep
        starts.append(e.pos)
        assert e.goal == goal and e.episode_index == ep + 1
        assert np.array_equal(r.obs, e.observe())
    # Starts are drawn from the trial's own stream.
    again = Darkroom(trial)
    replay = [again.pos]
    for _ in range(4):
        for _ in range(7):
            again.step(STAY)
        replay.append(again.pos)
    assert replay == starts
    assert len(set(starts)) > 1


def test_goal_differs_across_trials():
    goals = {Darkroom(TrialSpec(task_seed=s)).goal for s in range(50)}
    assert len(goals) > 20


def test_oracle_policy_examples():
    assert oracle_action((3, 3), (3, 3)) == STAY
    assert oracle_action((0, 0), (9, 9)) == RIGHT
    assert oracle_action((9, 0), (9, 9)) == UP
    assert oracle_action((5, 5), (2, 5)) == LEFT
    assert oracle_action((5, 5), (5, 1)) == DOWN


def test_oracle_corner_to_corner():
    e = env_at((0, 0), (9, 9))
    rewards = [e.step(oracle_action(e.pos, e.goal)).reward for _ in range(100)]
    arrival = rewards.index(1.0) + 1
    assert arrival == 18
    # The reward rule pays the arrival step too: 100 - 18 + 1.
    assert sum(rewards) == 83


@settings(max_examples=60, deadline=None)
@given(st.tuples(st.integers(0, 9), st.integers(0, 9)), st.tuples(st.integers(0, 9), st.integers(0, 9)))
def test_oracle_return_formula(start, goal):
    d = abs(start[0] - goal[0]) + abs(start[1] - goal[1])
    want = 100.0 if d == 0 else 100.0 - d + 1
    assert oracle_episode_return(start, goal) == want


def test_oracle_dominates_random_policies():
    rng = np.random.default_rng(0)
    for start, goal in [((0, 0), (9, 9)), ((4, 7), (5, 2)), ((3, 3), (3, 3))]:
        best = oracle_episode_return(start, goal)
        for _ in range(1000):
            e = env_at(start, goal)
            ret = sum(e.step(int(a)).reward for a in rng.integers(0, 5, 100))
            assert ret <= best


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.integers(0, 4), min_size=1, max_size=300))
def test_returns_bounded_and_trajectory_deterministic(seed, actions):
    a, b = Darkroom(TrialSpec(task_seed=seed)), Darkroom(TrialSpec(task_seed=seed))
    ep_return = 0.0
    for act in actions:
        ra, rb = a.step(act), b.step(act)
        assert np.array_equal(ra.obs, rb.obs) and ra.reward == rb.reward and ra.done == rb.done
        ep_return += ra.reward
        assert 0 <= ep_return <= 100
        if ra.done:
            ep_return = 0.0


def test_pixel_render_contract():
    spec = DarkroomSpec(variant="pixel")
    a, b = render_pixel(spec, (2, 3)), render_pixel(spec, (2, 3))
    assert a.shape == (25, 25, 3) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert not np.array_equal(a, render_pixel(spec, (3, 2)))
    assert a.min() >= 0 and a.max() <= 1
    spec2 = DarkroomSpec(variant="pixel", image_size=(30, 20))
    assert render_pixel(spec2, (0, 0)).shape == (20, 30, 3)


def test_pixel_images_distinct_for_every_cell():
    spec = DarkroomSpec(variant="pixel")
    imgs = {render_pixel(spec, (x, y)).tobytes() for x in range(10) for y in range(10)}
    assert len(imgs) == 100


def test_goal_never_rendered():
    e1 = env_at((4, 4), (0, 0), variant="pixel")
    e2 = env_at((4, 4), (8, 1), variant="pixel")
    assert np.array_equal(e1.observe(), e2.observe())


def test_single_worker_equals_plain_step():
    trial = TrialSpec(task_seed=9)
    plain, vec = Darkroom(trial), VectorDarkroom([trial])
    rng = np.random.default_rng(1)
    for a in rng.integers(0, 5, 250):
        r1 = plain.step(int(a))
        (r2,) = vector_step(vec, [a])
        assert np.array_equal(r1.obs, r2.obs) and (r1.reward, r1.done, r1.step) == (r2.reward, r2.done, r2.step)


def test_worker_results_independent_of_worker_count():
    trials = [TrialSpec(task_seed=100 + i) for i in range(20)]
    rng = np.random.default_rng(2)
    acts = rng.integers(0, 5, (512, 20))
    many = VectorDarkroom(trials)
    solo = VectorDarkroom([trials[7]])
    n = 0
    for t in range(512):
        rs = vector_step(many, acts[t])
        (r,) = vector_step(solo, [acts[t, 7]])
        n += len(rs)
        assert np.array_equal(rs[7].obs, r.obs) and rs[7].reward == r.reward
    assert n == 10240


def test_vector_step_worker_mismatch():
    with pytest.raises(ValueError, match="workers"):
        vector_step(VectorDarkroom([TrialSpec(task_seed=0)] * 3), [0, 1])


def test_trajectory_dump_round_trip(tmp_path):
    e = Darkroom(TrialSpec(task_seed=5, env=DarkroomSpec(horizon=10)))
    records = []
    for _ in range(25):
        obs = e.observe()
        a = oracle_action(e.pos, e.goal)
        r = e.step(a)
        records.append(dict(episode_index=r.episode_index, step=r.step, obs=obs, action=a, reward=r.reward, done=r.done))
    path = write_trajectory(tmp_path / "t.jsonl", records)
    back = read_trajectory(path)
    assert len(back) == 25 and set(back[0]) == {"episode_index", "step", "obs", "action", "reward", "done"}
    for a, b in zip(records, back):
        assert b["obs"] == pytest.approx(a["obs"].tolist())
        assert (b["action"], b["reward"], b["done"], b["episode_index"]) == (a["action"], a["reward"], a["done"], a["episode_index"])


def test_spec_validation():
    with pytest.raises(ValueError):
        DarkroomSpec(variant="rgbd")
    with pytest.raises(ValueError):
        DarkroomSpec(grid_size=0)
