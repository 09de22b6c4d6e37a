"""Partial-update windows and the learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class UpdateWindow:
    """Update after collecting ``[0, collect_end)``; the loss covers ``[loss_start, collect_end)``."""

    index: int
    collect_end: int
    loss_start: int

    @property
    def context(self) -> tuple[int, int]:
        return (0, self.collect_end)

    @property
    def loss(self) -> tuple[int, int]:
        return (self.loss_start, self.collect_end)

    @property
    def loss_len(self) -> int:
        return self.collect_end - self.loss_start


def partial_update_schedule(T: int, K: int) -> list[UpdateWindow]:
    """``K - 1`` partial updates with loss on the newest ``T / K`` steps, then one full update.

    >>> [(w.collect_end, w.loss_start) for w in partial_update_schedule(8, 4)]
    [(2, 0), (4, 2), (6, 4), (8, 0)]
    """
    if T < 1 or K < 1:
        raise ValueError("T and K must be positive")
    if T % K:
        raise ValueError(f"K={K} does not divide T={T}")
    chunk = T // K
    windows = [UpdateWindow(n, n * chunk, (n - 1) * chunk) for n in range(1, K)]
    windows.append(UpdateWindow(K, T, 0))
    return windows


def lr_schedule(env_step: float, lr_init: float, lr_peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from ``lr_init`` to ``lr_peak``, then cosine decay to 0 at ``total_steps``."""
    if env_step < 0:
        raise ValueError("env_step must be >= 0")
    if env_step >= total_steps:
        return 0.0
    if warmup_steps > 0 and env_step <= warmup_steps:
        return lr_init + (lr_peak - lr_init) * env_step / warmup_steps
    p = (env_step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * p))
