"""Trial-long rollout storage, KV-cache lifecycle and in-context episode shuffling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model.policy import ICLPolicy, KVCache, TokenBatch

_STEP_FIELDS = (
    "obs",
    "prev_action",
    "prev_reward",
    "episode_index",
    "within_pos",
    "actions",
    "logp",
    "values",
    "rewards",
    "dones",
    "bootstrap",
)


class BufferFullError(RuntimeError):
    pass


@dataclass(frozen=True)
class ContextWindow:
    start: int
    stop: int
    role: str = "context"

    def __post_init__(self):
        if not 0 <= self.start < self.stop:
            raise ValueError(f"invalid window [{self.start}, {self.stop})")


class RolloutBuffer:
    """Lock-step storage for ``n_workers`` sequences of up to ``T`` steps.

    Alongside each step's token it keeps the behaviour statistics recorded at
    collection time (action, log-prob, value) and the environment outcome.
    ``bootstrap`` holds a value estimate of the state after a step, filled only
    where the next step had not been collected when an update ran.
    """

    def __init__(self, n_workers: int, T: int, obs_key: str, obs_shape: tuple[int, ...]):
        self.n_workers, self.T = n_workers, T
        self.obs_key = obs_key
        B = n_workers
        self.obs = torch.zeros(B, T, *obs_shape)
        self.prev_action = torch.zeros(B, T, dtype=torch.long)
        self.prev_reward = torch.zeros(B, T)
        self.episode_index = torch.zeros(B, T, dtype=torch.long)
        self.within_pos = torch.zeros(B, T, dtype=torch.long)
        self.actions = torch.zeros(B, T, dtype=torch.long)
        self.logp = torch.zeros(B, T)
        self.values = torch.zeros(B, T)
        self.rewards = torch.zeros(B, T)
        self.dones = torch.zeros(B, T, dtype=torch.bool)
        self.bootstrap = torch.zeros(B, T)
        self.cursor = 0

    def __len__(self) -> int:
        return self.cursor

    @property
    def full(self) -> bool:
        return self.cursor >= self.T

    def append_step(self, token: TokenBatch, action, logp, value, reward, done) -> "RolloutBuffer":
        """Record one lock-step transition for every worker; ``token`` is ``[B, 1]``."""
        if self.full:
            raise BufferFullError(f"rollout buffer full ({self.T} steps)")
        t = self.cursor
        obs = token.image if self.obs_key == "image" else token.state
        self.obs[:, t] = obs[:, 0]
        self.prev_action[:, t] = token.prev_action[:, 0]
        self.prev_reward[:, t] = token.prev_reward[:, 0]
        self.episode_index[:, t] = token.episode_index[:, 0]
        self.within_pos[:, t] = token.within_pos[:, 0]
        self.actions[:, t] = torch.as_tensor(action)
        self.logp[:, t] = torch.as_tensor(logp)
        self.values[:, t] = torch.as_tensor(value)
        self.rewards[:, t] = torch.as_tensor(reward, dtype=torch.float32)
        self.dones[:, t] = torch.as_tensor(done, dtype=torch.bool)
        self.cursor = t + 1
        return self

    def tokens(self, start: int = 0, stop: int | None = None) -> TokenBatch:
        stop = self.cursor if stop is None else stop
        obs = self.obs[:, start:stop]
        return TokenBatch(
            prev_action=self.prev_action[:, start:stop],
            prev_reward=self.prev_reward[:, start:stop],
            episode_index=self.episode_index[:, start:stop],
            within_pos=self.within_pos[:, start:stop],
            state=obs if self.obs_key == "state" else None,
            image=obs if self.obs_key == "image" else None,
        )

    def record(self, worker: int, t: int) -> dict:
        return {f: getattr(self, f)[worker, t].clone() for f in _STEP_FIELDS}

    def clear(self) -> "RolloutBuffer":
        self.cursor = 0
        return self

    def episode_blocks(self, worker: int) -> list[tuple[int, int, bool]]:
        """``(start, stop, completed)`` for each contiguous episode of ``worker``."""
        n = self.cursor
        dones = self.dones[worker, :n].tolist()
        blocks, start = [], 0
        for t, d in enumerate(dones):
            if d:
                blocks.append((start, t + 1, True))
                start = t + 1
        if start < n:
            blocks.append((start, n, False))
        return blocks

    def shuffle_context_episodes(self, rng: np.random.Generator) -> "RolloutBuffer":
        """Permute each worker's completed episodes as whole blocks.

        The running (incomplete) episode stays last. Episode ids are relabeled
        to the new order; within-episode positions and all per-step fields move
        with their block.
        """
        n = self.cursor
        if n == 0:
            return self
        order = torch.empty(self.n_workers, n, dtype=torch.long)
        new_ids = torch.empty(self.n_workers, n, dtype=torch.long)
        for w in range(self.n_workers):
            blocks = self.episode_blocks(w)
            done_blocks = [b for b in blocks if b[2]]
            tail = [b for b in blocks if not b[2]]
            perm = rng.permutation(len(done_blocks)) if done_blocks else []
            pieces, ids = [], []
            for new_id, b in enumerate([done_blocks[i] for i in perm] + tail):
                pieces.append(torch.arange(b[0], b[1]))
                ids.append(torch.full((b[1] - b[0],), new_id, dtype=torch.long))
            order[w] = torch.cat(pieces)
            new_ids[w] = torch.cat(ids)
        for f in _STEP_FIELDS:
            arr = getattr(self, f)
            idx = order.view(self.n_workers, n, *([1] * (arr.dim() - 2))).expand(-1, -1, *arr.shape[2:])
            arr[:, :n] = torch.gather(arr[:, :n], 1, idx)
        self.episode_index[:, :n] = new_ids
        return self


def episode_ids_from_dones(dones: torch.Tensor) -> torch.Tensor:
    """Episode id of every step: the number of episode ends strictly before it."""
    d = dones.to(torch.long)
    return torch.cumsum(d, dim=-1) - d


def rebuild_kv_cache(model: ICLPolicy, buffer: RolloutBuffer, stop: int, capacity: int) -> KVCache:
    """Cache over the prefix ``[0, stop)`` under the model's current parameters."""
    if stop > capacity:
        raise ValueError(f"prefix {stop} exceeds cache capacity {capacity}")
    return model.build_cache(buffer.tokens(0, stop), capacity)


def clear_at_rollout_boundary(buffer: RolloutBuffer, cache: KVCache) -> tuple[RolloutBuffer, KVCache]:
    return buffer.clear(), cache.clear()


class TokenTracker:
    """Turns lock-step environment outcomes into the next ``[B, 1]`` token batch."""

    def __init__(self, first_obs: np.ndarray, obs_key: str):
        B = first_obs.shape[0]
        self.obs_key = obs_key
        self.obs = torch.as_tensor(first_obs, dtype=torch.float32)
        self.prev_action = torch.full((B,), -1, dtype=torch.long)
        self.prev_reward = torch.zeros(B)
        self.episode_index = torch.zeros(B, dtype=torch.long)
        self.within_pos = torch.zeros(B, dtype=torch.long)

    def token(self) -> TokenBatch:
        obs = self.obs[:, None]
        return TokenBatch(
            prev_action=self.prev_action[:, None].clone(),
            prev_reward=self.prev_reward[:, None].clone(),
            episode_index=self.episode_index[:, None].clone(),
            within_pos=self.within_pos[:, None].clone(),
            state=obs if self.obs_key == "state" else None,
            image=obs if self.obs_key == "image" else None,
        )

    def advance(self, actions: torch.Tensor, results) -> tuple[torch.Tensor, torch.Tensor]:
        """Consume one step of results; returns ``(rewards, dones)`` tensors."""
        rewards = torch.tensor([r.reward for r in results], dtype=torch.float32)
        dones = torch.tensor([r.done for r in results], dtype=torch.bool)
        self.obs = torch.as_tensor(np.stack([r.obs for r in results]), dtype=torch.float32)
        self.prev_action = torch.where(dones, -1, actions)
        self.prev_reward = torch.where(dones, 0.0, rewards)
        self.within_pos = torch.where(dones, 0, self.within_pos + 1)
        self.episode_index = self.episode_index + dones.long()
        return rewards, dones
