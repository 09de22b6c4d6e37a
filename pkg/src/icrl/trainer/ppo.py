"""GAE and the clipped PPO objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch


class NonFiniteLossError(FloatingPointError):
    pass


def compute_gae(
    rewards: torch.Tensor,
    values: torch.Tensor,
    dones: torch.Tensor,
    bootstrap_value,
    gamma: float,
    tau: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Advantages and returns along the last axis.

    ``bootstrap_value`` estimates the state after the final step; it is ignored
    where that step is terminal. Credit never crosses an episode boundary.
    """
    out_dtype = values.dtype if torch.is_tensor(values) and values.is_floating_point() else torch.float64
    rewards = torch.as_tensor(rewards, dtype=torch.float64)
    values = torch.as_tensor(values, dtype=torch.float64)
    notdone = 1.0 - torch.as_tensor(dones, dtype=torch.float64)
    for name, t in (("rewards", rewards), ("values", values)):
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite {name}")
    boot = torch.as_tensor(bootstrap_value, dtype=torch.float64).expand(rewards.shape[:-1])
    if not torch.isfinite(boot).all():
        raise ValueError("non-finite bootstrap value")
    n = rewards.shape[-1]
    next_values = torch.cat([values[..., 1:], boot.unsqueeze(-1)], dim=-1)
    deltas = rewards + gamma * next_values * notdone - values
    adv = torch.zeros_like(rewards)
    running = torch.zeros_like(boot)
    for t in range(n - 1, -1, -1):
        running = deltas[..., t] + gamma * tau * notdone[..., t] * running
        adv[..., t] = running
    return adv.to(out_dtype), (adv + values).to(out_dtype)


def normalize_advantages(adv: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return (adv - adv.mean()) / (adv.std(unbiased=False) + eps)


def categorical_entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(-1)


@dataclass
class PPOLoss:
    total: torch.Tensor
    policy: torch.Tensor
    value: torch.Tensor
    entropy: torch.Tensor
    approx_kl: torch.Tensor
    clip_frac: torch.Tensor

    def scalars(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "policy", "value", "entropy", "approx_kl", "clip_frac")}


def ppo_loss(
    logits: torch.Tensor,
    values: torch.Tensor,
    actions: torch.Tensor,
    old_logp: torch.Tensor,
    advantages: torch.Tensor,
    returns: torch.Tensor,
    clip_eps: float = 0.2,
    value_coef: float = 0.5,
    entropy_coef: float = 0.1,
) -> PPOLoss:
    """Clipped surrogate + value MSE − entropy bonus, averaged over all given steps."""
    logp_all = torch.log_softmax(logits, dim=-1)
    logp = logp_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    log_ratio = logp - old_logp
    ratio = torch.exp(log_ratio)
    surr = torch.minimum(ratio * advantages, torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * advantages)
    policy = -surr.mean()
    value = (values - returns).pow(2).mean()
    entropy = (-(logp_all.exp() * logp_all).sum(-1)).mean()
    total = policy + value_coef * value - entropy_coef * entropy
    with torch.no_grad():
        approx_kl = ((ratio - 1) - log_ratio).mean()
        clip_frac = ((ratio - 1).abs() > clip_eps).float().mean()
    return PPOLoss(total, policy, value, entropy, approx_kl, clip_frac)
