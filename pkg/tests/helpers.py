"""Shared builders for the test modules."""

import numpy as np
import torch

from icrl.envs import DarkroomSpec, TrialSpec, VectorDarkroom
from icrl.model import ModelConfig, TokenBatch, init_params
from icrl.rollout import TokenTracker


def small_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=4, d_model=32, d_mlp=64, n_sinks=1, sink_variant="sink_kv", depth_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_tokens(B: int, n: int, horizon: int = 100, seed: int = 0, state_dim: int = 2, image_shape=None) -> TokenBatch:
    """Plausible trial tokens: episodes of ``horizon`` steps back to back."""
    g = torch.Generator().manual_seed(seed)
    t = torch.arange(n)
    ep = (t // horizon).expand(B, n).clone()
    pos = (t % horizon).expand(B, n).clone()
    prev_a = torch.randint(0, 5, (B, n), generator=g)
    prev_a[pos == 0] = -1
    prev_r = (torch.rand(B, n, generator=g) < 0.2).float()
    prev_r[pos == 0] = 0.0
    batch = TokenBatch(prev_action=prev_a, prev_reward=prev_r, episode_index=ep, within_pos=pos)
    if image_shape is not None:
        batch.image = torch.rand(B, n, *image_shape, generator=g)
    else:
        batch.state = torch.rand(B, n, state_dim, generator=g)
    return batch


def rollout_tokens(n_workers: int, n: int, seed: int = 0) -> TokenBatch:
    """Tokens from real Darkroom trials driven by uniform random actions."""
    spec = DarkroomSpec()
    envs = VectorDarkroom([TrialSpec(task_seed=seed * 1000 + i, env=spec) for i in range(n_workers)])
    tracker = TokenTracker(envs.observe(), spec.obs_key)
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(n):
        parts.append(tracker.token())
        a = torch.as_tensor(rng.integers(0, 5, n_workers))
        tracker.advance(a, envs.step(a.tolist()))
    return TokenBatch.cat(parts)


def small_model(**kw):
    return init_params(small_config(**kw), seed=0).eval()


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
