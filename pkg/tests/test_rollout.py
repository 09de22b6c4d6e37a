import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import small_config, small_model
from icrl.envs import DarkroomSpec, TrialSpec, VectorDarkroom
from icrl.model import init_params
from icrl.rollout import (
    BufferFullError,
    ContextWindow,
    RolloutBuffer,
    TokenTracker,
    clear_at_rollout_boundary,
    episode_ids_from_dones,
    rebuild_kv_cache,
)


def fill_buffer(n_workers=3, T=60, horizon=13, seed=0, stop=None):
    """Random-action rollout into a buffer; episodes are ``horizon`` steps long."""
    spec = DarkroomSpec(horizon=horizon)
    envs = VectorDarkroom([TrialSpec(task_seed=seed + i, env=spec) for i in range(n_workers)])
    tracker = TokenTracker(envs.observe(), "state")
    buf = RolloutBuffer(n_workers, T, "state", (2,))
    g = torch.Generator().manual_seed(seed)
    for _ in range(T if stop is None else stop):
        tok = tracker.token()
        a = torch.randint(0, 5, (n_workers,), generator=g)
        rewards, dones = tracker.advance(a, envs.step(a.tolist()))
        buf.append_step(tok, a, -torch.rand(n_workers, generator=g), torch.randn(n_workers, generator=g), rewards, dones)
    return buf


def block_hashes(buf, w):
    out = []
    for start, stop, done in buf.episode_blocks(w):
        h = hashlib.sha256()
        for f in ("obs", "prev_action", "prev_reward", "within_pos", "actions", "logp", "values", "rewards", "dones"):
            h.update(getattr(buf, f)[w, start:stop].numpy().tobytes())
        out.append((h.hexdigest(), done))
    return out


def test_append_then_read_back():
    buf = RolloutBuffer(2, 4, "state", (2,))
    tracker = TokenTracker(np.array([[0.1, 0.2], [0.3, 0.4]], dtype=np.float32), "state")
    tok = tracker.token()
    buf.append_step(tok, torch.tensor([1, 3]), torch.tensor([-0.5, -1.5]), torch.tensor([0.25, 0.75]), [0.0, 1.0], [False, True])
    rec = buf.record(1, 0)
    assert rec["obs"].tolist() == pytest.approx([0.3, 0.4])
    assert int(rec["prev_action"]) == -1 and int(rec["actions"]) == 3
    assert float(rec["logp"]) == -1.5 and float(rec["values"]) == 0.75
    assert float(rec["rewards"]) == 1.0 and bool(rec["dones"])
    assert len(buf) == 1


def test_buffer_capacity():
    buf = fill_buffer(T=20, stop=20)
    assert buf.full and len(buf) == 20
    tok = TokenTracker(np.zeros((3, 2), dtype=np.float32), "state").token()
    with pytest.raises(BufferFullError):
        buf.append_step(tok, [0, 0, 0], [0.0] * 3, [0.0] * 3, [0.0] * 3, [False] * 3)


def test_dones_reconstruct_episode_ids():
    buf = fill_buffer(T=80, horizon=11)
    assert torch.equal(episode_ids_from_dones(buf.dones), buf.episode_index)
    ids = buf.episode_index[0].tolist()
    assert ids == sorted(ids) and ids[-1] == 79 // 11


def test_context_window_bounds():
    assert ContextWindow(0, 5, "loss").stop == 5
    for a, b in ((3, 3), (-1, 2), (4, 2)):
        with pytest.raises(ValueError):
            ContextWindow(a, b)


def test_shuffle_single_completed_episode_is_identity():
    buf = fill_buffer(T=40, horizon=25, stop=40)
    before = {f: getattr(buf, f).clone() for f in ("obs", "actions", "episode_index", "within_pos")}
    buf.shuffle_context_episodes(np.random.default_rng(0))
    for f, v in before.items():
        assert torch.equal(getattr(buf, f), v)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(1, 90), st.integers(0, 2**31 - 1))
def test_shuffle_permutes_whole_blocks(horizon, stop, seed):
    buf = fill_buffer(n_workers=2, T=90, horizon=horizon, seed=seed % 1000, stop=stop)
    before = [block_hashes(buf, w) for w in range(2)]
    sums = buf.rewards.sum().item()
    buf.shuffle_context_episodes(np.random.default_rng(seed))
    for w in range(2):
        after = block_hashes(buf, w)
        assert sorted(h for h, _ in after) == sorted(h for h, _ in before[w])
        # The running episode stays last.
        if not before[w][-1][1]:
            assert after[-1] == before[w][-1]
        ids = buf.episode_index[w, :stop]
        assert torch.equal(ids, episode_ids_from_dones(buf.dones[w, :stop]))
        for start, end, _ in buf.episode_blocks(w):
            assert buf.within_pos[w, start:end].tolist() == list(range(end - start))
    assert buf.rewards.sum().item() == sums
    assert len(buf) == stop


def test_shuffle_is_reproducible_and_moves_blocks():
    a, b = fill_buffer(T=100, horizon=10), fill_buffer(T=100, horizon=10)
    a.shuffle_context_episodes(np.random.default_rng(5))
    b.shuffle_context_episodes(np.random.default_rng(5))
    assert torch.equal(a.obs, b.obs) and torch.equal(a.actions, b.actions)
    c = fill_buffer(T=100, horizon=10)
    assert not torch.equal(a.obs, c.obs)


def test_rebuild_equals_sequential_replay():
    model = small_model(n_sinks=2)
    buf = fill_buffer(T=70, horizon=13)
    buf.shuffle_context_episodes(np.random.default_rng(1))
    for b in (1, 26, 70):
        rebuilt = rebuild_kv_cache(model, buf, b, 80)
        replay = model.init_cache(3, 80)
        tokens = buf.tokens(0, b)
        for t in range(b):
            _, replay = model.forward_incremental(replay, tokens.slice(t, t + 1))
        assert rebuilt.length == replay.length == b
        for k1, k2, v1, v2 in zip(rebuilt.keys, replay.keys, rebuilt.values, replay.values):
            assert (k1[:, :, :b] - k2[:, :, :b]).abs().max() <= 1e-4
            assert (v1[:, :, :b] - v2[:, :, :b]).abs().max() <= 1e-4
        assert torch.equal(rebuilt.episode_index[:, :b], replay.episode_index[:, :b])


def test_rebuild_empty_prefix_and_capacity():
    model = small_model()
    buf = fill_buffer(T=20)
    assert rebuild_kv_cache(model, buf, 0, 20).length == 0
    with pytest.raises(ValueError, match="capacity"):
        rebuild_kv_cache(model, buf, 20, 10)


def test_rebuild_after_update_differs_from_stale_cache():
    model = init_params(small_config(), 0).eval()
    buf = fill_buffer(T=30)
    stale = rebuild_kv_cache(model, buf, 30, 30)
    with torch.no_grad():
        for blk in model.trunks[0].blocks:
            blk.wk.weight.mul_(1.5)
            blk.wv.weight.add_(0.05)
    fresh = rebuild_kv_cache(model, buf, 30, 30)
    assert abs(float(fresh.keys[0].norm() - stale.keys[0].norm())) > 1e-3
    assert abs(float(fresh.values[1].norm() - stale.values[1].norm())) > 1e-3


def test_clear_at_rollout_boundary():
    model = small_model()
    buf = fill_buffer(T=20)
    cache = rebuild_kv_cache(model, buf, 20, 21)
    tok = buf.tokens(0, 1)
    buf, cache = clear_at_rollout_boundary(buf, cache)
    assert len(buf) == 0 and cache.length == 0
    buf, cache = clear_at_rollout_boundary(buf, cache)
    assert len(buf) == 0 and cache.length == 0
    out, _ = model.forward_incremental(cache, tok)
    fresh, _ = model.forward_incremental(model.init_cache(3, 21), tok)
    assert torch.equal(out.logits, fresh.logits)


def test_tracker_marks_episode_starts():
    spec = DarkroomSpec(horizon=3)
    envs = VectorDarkroom([TrialSpec(task_seed=1, env=spec)])
    tr = TokenTracker(envs.observe(), "state")
    seen = []
    for a in (1, 2, 3, 4):
        tok = tr.token()
        seen.append((int(tok.prev_action), int(tok.episode_index), int(tok.within_pos)))
        tr.advance(torch.tensor([a]), envs.step([a]))
    assert seen == [(-1, 0, 0), (1, 0, 1), (2, 0, 2), (-1, 1, 0)]
