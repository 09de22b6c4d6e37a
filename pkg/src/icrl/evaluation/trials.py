"""Multi-episode trial evaluation, context-length generalization and few-shot imitation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..envs import Darkroom, DarkroomSpec, TrialSpec, VectorDarkroom, oracle_action
from ..model.policy import ICLPolicy, TokenBatch
from ..rollout import TokenTracker
from ..trainer.loop import EVAL_STREAM, sample_actions, trial_seeds

TRUNCATION_POLICIES = (None, "drop_oldest_episodes")


class ContextCapacityError(ValueError):
    pass


@dataclass
class TrialMetrics:
    """Per-episode-index aggregates over many trials."""

    mean_return: np.ndarray
    stderr: np.ndarray
    mean_length: np.ndarray
    count: np.ndarray
    n_trials: int
    context_length: int

    @classmethod
    def from_returns(cls, returns: np.ndarray, horizon: int, context_length: int) -> "TrialMetrics":
        returns = np.asarray(returns, dtype=np.float64)
        n = returns.shape[0]
        std = returns.std(axis=0, ddof=1) if n > 1 else np.zeros(returns.shape[1])
        return cls(
            mean_return=returns.mean(axis=0),
            stderr=std / math.sqrt(n),
            mean_length=np.full(returns.shape[1], float(horizon)),
            count=np.full(returns.shape[1], n),
            n_trials=n,
            context_length=context_length,
        )

    def to_dict(self) -> dict:
        return {
            "mean_return": self.mean_return.tolist(),
            "stderr": self.stderr.tolist(),
            "mean_length": self.mean_length.tolist(),
            "count": self.count.tolist(),
            "n_trials": self.n_trials,
            "context_length": self.context_length,
        }


def eval_trial_specs(seed: int, n_trials: int, env: DarkroomSpec, batch: int = 0) -> list[TrialSpec]:
    """Held-out trials: seeds come from a stream disjoint from training rollouts."""
    return [TrialSpec(task_seed=s, env=env) for s in trial_seeds(seed, EVAL_STREAM, batch, n_trials)]


@dataclass
class TrialRun:
    returns: np.ndarray  # [n_trials, n_episodes]
    tokens: TokenBatch | None = None
    actions: torch.Tensor | None = None


def run_trials(
    model: ICLPolicy,
    trials: list[TrialSpec],
    n_episodes: int,
    max_context: int | None = None,
    *,
    seed: int = 0,
    demo_episodes: int = 0,
    truncation: str | None = None,
    greedy: bool = False,
    keep_tokens: bool = False,
) -> TrialRun:
    """Run every trial for ``n_episodes`` back-to-back episodes in one context.

    The first ``demo_episodes`` episodes are driven by the shortest-path oracle
    and only enter the context; their returns are still reported. With
    ``truncation="drop_oldest_episodes"`` a full context is rebuilt from the
    most recent whole episodes (relabeled from 0) whenever the next episode
    would not fit.
    """
    if truncation not in TRUNCATION_POLICIES:
        raise ValueError(f"unknown truncation policy {truncation!r}")
    env = trials[0].env
    H = env.horizon
    needed = n_episodes * H
    capacity = needed if max_context is None else int(max_context)
    if capacity < needed and truncation is None:
        raise ContextCapacityError(f"context {capacity} < {n_episodes} episodes x {H} steps and no truncation policy")
    if capacity < H:
        raise ContextCapacityError(f"context {capacity} shorter than one episode ({H})")
    model.eval()
    B = len(trials)
    envs = VectorDarkroom(trials)
    tracker = TokenTracker(envs.observe(), env.obs_key)
    cache = model.init_cache(B, capacity)
    gen = torch.Generator().manual_seed(int(seed))
    returns = np.zeros((B, n_episodes))
    history: list[TokenBatch] = []
    episode_offset = 0
    all_tokens, all_actions = [], []
    for ep in range(n_episodes):
        if cache.length + H > capacity:
            # Keep the latest whole episodes that leave room for a full new one.
            keep = (capacity - H) // H
            ctx = TokenBatch.cat(history[len(history) - keep * H :]) if keep else None
            episode_offset = ep - keep
            if ctx is not None:
                ctx = ctx.clone()
                ctx.episode_index -= ctx.episode_index[:, :1].clone()
            cache = model.build_cache(ctx, capacity) if ctx is not None else model.init_cache(B, capacity)
            history = history[len(history) - keep * H :] if keep else []
        for _ in range(H):
            token = tracker.token()
            token.episode_index -= episode_offset
            out, cache = model.forward_incremental(cache, token)
            logits = out.logits[:, -1]
            if ep < demo_episodes:
                actions = torch.tensor([oracle_action(e.pos, e.goal) for e in envs.envs])
            elif greedy:
                actions = logits.argmax(-1)
            else:
                actions, _ = sample_actions(logits, gen)
            results = envs.step(actions.tolist())
            rewards, _ = tracker.advance(actions, results)
            returns[:, ep] += rewards.numpy()
            history.append(token)
            if keep_tokens:
                all_tokens.append(token)
                all_actions.append(actions)
    run = TrialRun(returns)
    if keep_tokens:
        run.tokens = TokenBatch.cat(all_tokens)
        run.actions = torch.stack(all_actions, dim=1)
    return run


def evaluate_trial(
    model: ICLPolicy,
    trials: list[TrialSpec],
    n_episodes: int,
    max_context: int | None = None,
    **kw,
) -> np.ndarray:
    """Per-trial, per-episode returns ``[n_trials, n_episodes]``."""
    return run_trials(model, trials, n_episodes, max_context, **kw).returns


def context_generalization_eval(
    model: ICLPolicy,
    trials: list[TrialSpec],
    train_context: int,
    multiplier: float,
    *,
    seed: int = 0,
) -> TrialMetrics:
    """Evaluate with ``multiplier × train_context`` steps of context, as many whole episodes as fit."""
    H = trials[0].env.horizon
    context = int(multiplier * train_context)
    n_episodes = context // H
    if n_episodes < 1:
        raise ContextCapacityError(f"context {context} holds no whole episode of length {H}")
    returns = evaluate_trial(model, trials, n_episodes, context, seed=seed)
    return TrialMetrics.from_returns(returns, H, context)


def encode_demonstrations(trials: list[TrialSpec], n_demos: int) -> tuple[TokenBatch | None, list[list[dict]]]:
    """Oracle episodes for each trial as context tokens plus raw transition records.

    Demos use the trial's own goal and successive seed-derived starts, so a
    fresh episode after them is the trial's episode ``n_demos``.
    """
    envs = VectorDarkroom(trials)
    tracker = TokenTracker(envs.observe(), trials[0].env.obs_key)
    tokens, records = [], [[] for _ in trials]
    for _ in range(n_demos * trials[0].env.horizon):
        token = tracker.token()
        actions = torch.tensor([oracle_action(e.pos, e.goal) for e in envs.envs])
        obs = token.image if token.image is not None else token.state
        results = envs.step(actions.tolist())
        tracker.advance(actions, results)
        for i, r in enumerate(results):
            records[i].append(
                {
                    "episode_index": r.episode_index,
                    "step": r.step,
                    "obs": obs[i, 0].numpy(),
                    "action": int(actions[i]),
                    "reward": r.reward,
                    "done": r.done,
                }
            )
        tokens.append(token)
    return (TokenBatch.cat(tokens) if tokens else None), records


def few_shot_imitation_eval(
    model: ICLPolicy,
    trials: list[TrialSpec],
    n_demos: int,
    *,
    seed: int = 0,
    greedy: bool = False,
    max_context: int | None = None,
) -> np.ndarray:
    """First-episode return after ``n_demos`` oracle demonstrations in context, per trial."""
    if n_demos < 0:
        raise ValueError("n_demos must be >= 0")
    H = trials[0].env.horizon
    if max_context is not None and (n_demos + 1) * H > max_context:
        raise ContextCapacityError(f"{n_demos} demos plus one episode need {(n_demos + 1) * H} > {max_context} steps")
    run = run_trials(model, trials, n_demos + 1, max_context, seed=seed, demo_episodes=n_demos, greedy=greedy)
    return run.returns[:, n_demos]


def random_policy_return(env: DarkroomSpec, n_trials: int, seed: int = 0) -> float:
    """Monte-Carlo mean episode return of the uniform random policy."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for i in range(n_trials):
        e = Darkroom(TrialSpec(task_seed=int(rng.integers(2**31)), env=env))
        for a in rng.integers(0, 5, size=env.horizon):
            total += e.step(int(a)).reward
    return total / n_trials
