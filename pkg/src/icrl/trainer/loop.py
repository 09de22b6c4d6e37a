"""Rollout/update orchestration with partial updates."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..envs import DarkroomSpec, TrialSpec, VectorDarkroom
from ..model.policy import ICLPolicy
from ..rollout import RolloutBuffer, TokenTracker, rebuild_kv_cache
from .ppo import NonFiniteLossError, compute_gae, normalize_advantages, ppo_loss
from .schedule import UpdateWindow, lr_schedule, partial_update_schedule

log = logging.getLogger(__name__)

# Stream tags for SeedSequence spawning; training trials never reuse evaluation seeds.
_TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass
class TrainConfig:
    T: int = 512
    K: int = 4
    gamma: float = 0.99
    tau: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.1
    value_coef: float = 0.5
    lr_init: float = 2e-7
    lr_peak: float = 2e-4
    warmup_steps: int = 100_000
    total_steps: int = 10_000_000
    n_workers: int = 16
    epochs: int = 1
    n_minibatches: int = 1
    reward_scale: float = 1.0
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5
    shuffle_episodes: bool = True

    def validate(self) -> "TrainConfig":
        from ..model.config import ConfigError

        if self.K < 1:
            raise ConfigError("train.K", "must be >= 1")
        if self.T < 1 or self.T % self.K:
            raise ConfigError("train.K", f"K={self.K} must divide T={self.T}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("train.gamma", "must be in (0, 1]")
        if not 0 <= self.tau <= 1:
            raise ConfigError("train.tau", "must be in [0, 1]")
        for name in ("n_workers", "epochs", "total_steps", "n_minibatches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}", "must be >= 1")
        if self.n_workers % self.n_minibatches:
            raise ConfigError("train.n_minibatches", f"must divide n_workers={self.n_workers}")
        if not self.reward_scale > 0:
            raise ConfigError("train.reward_scale", "must be > 0")
        return self

    def to_dict(self):
        return asdict(self)


def trial_seeds(seed: int, stream: int, index: int, n: int) -> list[int]:
    """``n`` task seeds for rollout/evaluation batch ``index`` of ``stream``."""
    ss = np.random.SeedSequence([int(seed), stream, int(index)])
    return [int(s) for s in ss.generate_state(n, dtype=np.uint32)]


def _rollout_rngs(seed: int, index: int):
    ss = np.random.SeedSequence([int(seed), _TRAIN_STREAM, int(index), 7])
    a, b, c = ss.generate_state(3, dtype=np.uint64)
    sample = torch.Generator().manual_seed(int(a))
    dropout = torch.Generator().manual_seed(int(b))
    shuffle = np.random.default_rng(int(c))
    return sample, dropout, shuffle


def sample_actions(logits: torch.Tensor, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    logp_all = torch.log_softmax(logits.float(), dim=-1)
    actions = torch.multinomial(logp_all.exp(), 1, generator=generator).squeeze(-1)
    return actions, logp_all.gather(-1, actions[:, None]).squeeze(-1)


class Trainer:
    """PPO over trial-long rollouts, updating ``K`` times per rollout.

    All randomness of rollout ``i`` derives from ``(seed, i)``, so resuming from
    a checkpoint taken between rollouts reproduces an uninterrupted run.
    """

    def __init__(self, model: ICLPolicy, env: DarkroomSpec, cfg: TrainConfig, seed: int = 0):
        self.model = model
        self.env = env
        self.cfg = cfg.validate()
        self.seed = int(seed)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, eps=cfg.adam_eps)
        self.env_steps = 0
        self.rollouts_done = 0
        self.windows = partial_update_schedule(cfg.T, cfg.K)
        obs_shape = env.image_shape if env.variant == "pixel" else (2,)
        self.buffer = RolloutBuffer(cfg.n_workers, cfg.T, env.obs_key, obs_shape)

    @property
    def steps_per_rollout(self) -> int:
        return self.cfg.n_workers * self.cfg.T

    def current_lr(self, env_step: int) -> float:
        c = self.cfg
        return lr_schedule(env_step, c.lr_init, c.lr_peak, c.warmup_steps, c.total_steps)

    # -- checkpoint support -------------------------------------------------
    def optimizer_arrays(self) -> dict[str, torch.Tensor]:
        names = {id(p): n for n, p in self.model.named_parameters()}
        out = {}
        for p, st in self.optimizer.state.items():
            n = names[id(p)]
            out[f"adam/{n}/exp_avg"] = st["exp_avg"]
            out[f"adam/{n}/exp_avg_sq"] = st["exp_avg_sq"]
            out[f"adam/{n}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
        return out

    def load_optimizer_arrays(self, arrays: dict[str, torch.Tensor]):
        for n, p in self.model.named_parameters():
            key = f"adam/{n}/exp_avg"
            if key not in arrays:
                continue
            self.optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"adam/{n}/step"][0])),
                "exp_avg": arrays[key].clone().to(p.dtype),
                "exp_avg_sq": arrays[f"adam/{n}/exp_avg_sq"].clone().to(p.dtype),
            }

    def state_meta(self) -> dict:
        return {"env_steps": self.env_steps, "rollouts_done": self.rollouts_done, "seed": self.seed}

    def load_state_meta(self, meta: dict):
        self.env_steps = int(meta["env_steps"])
        self.rollouts_done = int(meta["rollouts_done"])

    # -- one rollout ----------------------------------------------------------
    def _update(self, window: UpdateWindow, dropout_gen) -> dict:
        cfg, buf, model = self.cfg, self.buffer, self.model
        ls, ce = window.loss
        # Targets use scaled rewards; logged returns stay in environment units.
        adv, ret = compute_gae(
            buf.rewards[:, ls:ce] * cfg.reward_scale,
            buf.values[:, ls:ce],
            buf.dones[:, ls:ce],
            buf.bootstrap[:, ce - 1],
            cfg.gamma,
            cfg.tau,
        )
        adv = normalize_advantages(adv)
        env_step = self.env_steps + cfg.n_workers * ce
        lr = self.current_lr(env_step)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        tokens = buf.tokens(0, ce)
        model.train()
        # Worker order for the minibatch split is fixed, so runs stay reproducible.
        groups = torch.arange(cfg.n_workers).chunk(cfg.n_minibatches)
        stats = {}
        for _ in range(cfg.epochs):
            for rows in groups:
                out = model.forward_sequence(tokens.select(rows), train_mode=True, generator=dropout_gen)
                loss = ppo_loss(
                    out.logits[:, ls:ce],
                    out.value[:, ls:ce],
                    buf.actions[rows, ls:ce],
                    buf.logp[rows, ls:ce],
                    adv[rows],
                    ret[rows],
                    cfg.clip_eps,
                    cfg.value_coef,
                    cfg.entropy_coef,
                )
                if not torch.isfinite(loss.total):
                    raise NonFiniteLossError(
                        f"non-finite loss in rollout {self.rollouts_done} window {window.index} "
                        f"(context [0,{ce}), loss [{ls},{ce})): {loss.scalars()}"
                    )
                self.optimizer.zero_grad(set_to_none=True)
                loss.total.backward()
                grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
                self.optimizer.step()
                stats = loss.scalars()
                stats["grad_norm"] = float(grad_norm)
        model.eval()
        stats.update(env_step=env_step, window=window.index, lr=lr, context=ce, loss_start=ls)
        return stats

    def train_rollout(self) -> list[dict]:
        """Collect one trial-long rollout per worker, updating at every window end."""
        cfg, model, buf = self.cfg, self.model, self.buffer
        index = self.rollouts_done
        sample_gen, dropout_gen, shuffle_rng = _rollout_rngs(self.seed, index)
        seeds = trial_seeds(self.seed, _TRAIN_STREAM, index, cfg.n_workers)
        envs = VectorDarkroom([TrialSpec(task_seed=s, env=self.env) for s in seeds])
        tracker = TokenTracker(envs.observe(), self.env.obs_key)
        buf.clear()
        # One spare slot for the bootstrap peek after the final step.
        cache = model.init_cache(cfg.n_workers, cfg.T + 1)
        model.eval()
        completed_returns = []
        by_worker = [[] for _ in range(cfg.n_workers)]
        ep_return = torch.zeros(cfg.n_workers)
        records = []
        for window in self.windows:
            while buf.cursor < window.collect_end:
                token = tracker.token()
                out, cache = model.forward_incremental(cache, token)
                actions, logp = sample_actions(out.logits[:, -1], sample_gen)
                results = envs.step(actions.tolist())
                rewards, dones = tracker.advance(actions, results)
                buf.append_step(token, actions, logp, out.value[:, -1], rewards, dones)
                ep_return += rewards
                if bool(dones.any()):
                    for w in dones.nonzero().flatten().tolist():
                        by_worker[w].append(float(ep_return[w]))
                        completed_returns.append(float(ep_return[w]))
                    ep_return[dones] = 0.0
            # Value of the state after the window's last step, under the collecting parameters.
            peek, _ = model.forward_incremental(cache, tracker.token(), commit=False)
            buf.bootstrap[:, window.collect_end - 1] = peek.value[:, -1]

            stats = self._update(window, dropout_gen)
            stats["mean_return"] = float(np.mean(completed_returns)) if completed_returns else float("nan")
            stats["episodes"] = len(completed_returns)
            stats["rollout"] = index
            if window.index == cfg.K:
                m = min(len(r) for r in by_worker)
                stats["return_by_episode"] = np.array([r[:m] for r in by_worker]).mean(0).tolist() if m else []
            records.append(stats)
            if window.index < cfg.K:
                if cfg.shuffle_episodes:
                    buf.shuffle_context_episodes(shuffle_rng)
                cache = rebuild_kv_cache(model, buf, buf.cursor, cfg.T + 1)
        self.env_steps += self.steps_per_rollout
        self.rollouts_done += 1
        buf.clear()
        return records
