"""Causal transformer actor-critic over a trial-long token sequence.

Every step contributes one token built from the observation, the previous
action and the previous reward. Within-episode position enters through a
learned table added to the token; the episode index enters through a rotary
rotation of queries and keys inside every attention layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import apply_rope, rope_angles, sink_attention
from .config import ModelConfig

NO_ACTION = -1


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class CacheFullError(RuntimeError):
    pass


@dataclass
class TokenInput:
    """One step of a trial as seen by the policy."""

    obs: dict
    prev_action: int | None
    prev_reward: float
    episode_index: int
    within_episode_pos: int


@dataclass
class TokenBatch:
    """A batch of token sequences, ``[B, n]`` leading dimensions throughout.

    ``prev_action`` holds ``NO_ACTION`` at the first step of an episode.
    """

    prev_action: torch.Tensor
    prev_reward: torch.Tensor
    episode_index: torch.Tensor
    within_pos: torch.Tensor
    state: torch.Tensor | None = None
    image: torch.Tensor | None = None

    @property
    def batch_size(self) -> int:
        return self.prev_action.shape[0]

    def __len__(self) -> int:
        return self.prev_action.shape[1]

    def _map(self, fn) -> "TokenBatch":
        return TokenBatch(
            **{k: (None if getattr(self, k) is None else fn(k, getattr(self, k))) for k in self._fields()}
        )

    @staticmethod
    def _fields():
        return ("prev_action", "prev_reward", "episode_index", "within_pos", "state", "image")

    def slice(self, start: int, stop: int) -> "TokenBatch":
        return self._map(lambda _, t: t[:, start:stop])

    def select(self, rows) -> "TokenBatch":
        return self._map(lambda _, t: t[rows])

    def to(self, dtype: torch.dtype) -> "TokenBatch":
        return self._map(lambda k, t: t.to(dtype) if t.is_floating_point() else t)

    def clone(self) -> "TokenBatch":
        return self._map(lambda _, t: t.clone())

    @classmethod
    def cat(cls, parts: list["TokenBatch"], dim: int = 1) -> "TokenBatch":
        out = {}
        for k in cls._fields():
            vals = [getattr(p, k) for p in parts]
            out[k] = None if vals[0] is None else torch.cat(vals, dim=dim)
        return cls(**out)

    @classmethod
    def from_tokens(cls, tokens: list[TokenInput]) -> "TokenBatch":
        """Stack a single sequence of ``TokenInput`` into a ``[1, n]`` batch."""

        def obs_stack(key):
            if key not in tokens[0].obs or tokens[0].obs[key] is None:
                return None
            return torch.as_tensor([list(_flat(t.obs[key])) for t in tokens], dtype=torch.float32)[None]

        batch = cls(
            prev_action=torch.tensor([[NO_ACTION if t.prev_action is None else t.prev_action for t in tokens]]),
            prev_reward=torch.tensor([[float(t.prev_reward) for t in tokens]]),
            episode_index=torch.tensor([[t.episode_index for t in tokens]]),
            within_pos=torch.tensor([[t.within_episode_pos for t in tokens]]),
            state=obs_stack("state"),
        )
        if "image" in tokens[0].obs and tokens[0].obs["image"] is not None:
            batch.image = torch.stack([torch.as_tensor(t.obs["image"], dtype=torch.float32) for t in tokens])[None]
        return batch


def _flat(x):
    return torch.as_tensor(x, dtype=torch.float32).reshape(-1).tolist()


@dataclass
class PolicyOutput:
    logits: torch.Tensor  # [B, n, A]
    value: torch.Tensor  # [B, n]
    attention: list[torch.Tensor] | None = None  # per layer [B, H, n, s + keys]


@dataclass
class KVCache:
    """Per-layer cached keys/values ``[B, H, capacity, d_head]`` plus position metadata.

    Sink vectors are never stored here; they are re-derived from the parameters
    at every attention call.
    """

    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    episode_index: torch.Tensor  # [B, capacity]
    within_pos: torch.Tensor  # [B, capacity]
    length: int = 0

    @property
    def capacity(self) -> int:
        return self.episode_index.shape[1]

    @property
    def batch_size(self) -> int:
        return self.episode_index.shape[0]

    def clear(self) -> "KVCache":
        self.length = 0
        return self

    def copy(self) -> "KVCache":
        return KVCache(
            [k.clone() for k in self.keys],
            [v.clone() for v in self.values],
            self.episode_index.clone(),
            self.within_pos.clone(),
            self.length,
        )

    def layer(self, i: int, extra: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
        n = self.length + extra
        return self.keys[i][:, :, :n], self.values[i][:, :, :n]


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class ImageEncoder(nn.Module):
    def __init__(self, shape: tuple[int, int, int], d_model: int):
        super().__init__()
        h, w, c = shape
        self.conv1 = nn.Conv2d(c, 16, 3, stride=2)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2)
        with torch.no_grad():
            n = self.conv2(self.conv1(torch.zeros(1, c, h, w))).numel()
        self.proj = nn.Linear(n, d_model)

    def forward(self, img):
        lead = img.shape[:-3]
        x = img.reshape(-1, *img.shape[-3:]).permute(0, 3, 1, 2)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.proj(x.flatten(1)).reshape(*lead, -1)


class TokenEmbedding(nn.Module):
    """Encode each observation component separately, concatenate, project to ``d_model``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        spec = cfg.obs_spec
        n_parts = 2
        self.state_enc = None
        self.image_enc = None
        if spec.state_dim:
            self.state_enc = nn.Sequential(nn.Linear(spec.state_dim, d), nn.GELU(), nn.Linear(d, d))
            n_parts += 1
        if spec.image_shape is not None:
            self.image_enc = ImageEncoder(spec.image_shape, d)
            n_parts += 1
        self.action_emb = nn.Embedding(cfg.action_count + 1, d)
        self.reward_proj = nn.Linear(1, d)
        self.fuse = nn.Linear(n_parts * d, d)
        self.pos_table = nn.Parameter(torch.zeros(cfg.max_within_episode_len, d))
        self.action_count = cfg.action_count

    def forward(self, tokens: TokenBatch):
        parts = []
        if self.state_enc is not None:
            parts.append(self.state_enc(tokens.state))
        if self.image_enc is not None:
            parts.append(self.image_enc(tokens.image))
        act = torch.where(tokens.prev_action < 0, self.action_count, tokens.prev_action)
        parts.append(self.action_emb(act))
        parts.append(self.reward_proj(tokens.prev_reward.unsqueeze(-1)))
        return self.fuse(torch.cat(parts, dim=-1)) + self.pos_table[tokens.within_pos]


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_head
        self.variant = cfg.sink_variant
        self.norm1 = RMSNorm(d)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.norm2 = RMSNorm(d)
        self.fc1 = nn.Linear(d, cfg.d_mlp)
        self.fc2 = nn.Linear(cfg.d_mlp, d)
        self.k_sink = nn.Parameter(torch.zeros(cfg.n_sinks, d)) if cfg.learned_sink_keys else None
        self.v_sink = nn.Parameter(torch.zeros(cfg.n_sinks, d)) if cfg.learned_sink_values else None

    def heads(self, x):
        # [B, n, d] -> [B, H, n, d_head]
        return x.unflatten(-1, (self.n_heads, self.d_head)).transpose(-3, -2)

    def param_sinks(self):
        def per_head(p):
            return None if p is None else p.view(-1, self.n_heads, self.d_head).transpose(0, 1)

        return per_head(self.k_sink), per_head(self.v_sink)

    def mlp(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm2(x))))

    def attend(self, x, rope, sinks, mask, cache=None, cache_slot=None, return_weights=False):
        h = self.norm1(x)
        q, k, v = self.heads(self.wq(h)), self.heads(self.wk(h)), self.heads(self.wv(h))
        if rope is not None:
            cos, sin = rope
            q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        if cache is not None:
            start = cache.length
            cache.keys[cache_slot][:, :, start : start + k.shape[-2]] = k
            cache.values[cache_slot][:, :, start : start + k.shape[-2]] = v
            k, v = cache.layer(cache_slot, extra=q.shape[-2])
        variant = "none" if self.variant == "none" else ("sink_kv" if self.variant == "sink_token" else self.variant)
        out = sink_attention(q, k, v, sinks[0], sinks[1], mask, variant, return_weights=return_weights)
        weights = None
        if return_weights:
            out, weights = out
        return self.wo(out.transpose(-3, -2).flatten(-2)), weights


class Trunk(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = TokenEmbedding(cfg)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm_f = RMSNorm(cfg.d_model)
        self.sink_tokens = nn.Parameter(torch.zeros(cfg.n_sinks, cfg.d_model)) if cfg.sink_variant == "sink_token" else None

    def token_sinks(self, keep):
        """Per-layer ``(K_s, V_s)`` of the prepended sink tokens.

        Sink tokens sit before every real input and, under causal attention,
        see only each other; their keys and values are therefore a function of
        the parameters alone (and of the per-sequence depth-dropout draw).
        """
        s = self.sink_tokens.shape[0]
        h = self.sink_tokens.unsqueeze(0)
        if keep is not None:
            h = h.expand(keep[0].shape[0], -1, -1)
        causal = torch.ones(s, s, dtype=torch.bool, device=h.device).tril()
        out = []
        for i, blk in enumerate(self.blocks):
            hn = blk.norm1(h)
            q, k, v = blk.heads(blk.wq(hn)), blk.heads(blk.wk(hn)), blk.heads(blk.wv(hn))
            out.append((k, v))
            a = sink_attention(q, k, v, mask=causal, variant="none")
            a = blk.wo(a.transpose(-3, -2).flatten(-2))
            if keep is None:
                h = h + a
                h = h + blk.mlp(h)
            else:
                h = h + keep[i] * a
                h = h + keep[i] * blk.mlp(h)
        return out

    def forward(self, tokens: TokenBatch, mask, rope, cache=None, slot0=0, keep=None, return_weights=False):
        x = self.embed(tokens)
        weights = []
        sinks = self.token_sinks(keep) if self.sink_tokens is not None else None
        for i, blk in enumerate(self.blocks):
            blk_sinks = sinks[i] if sinks is not None else blk.param_sinks()
            a, w = blk.attend(x, rope, blk_sinks, mask, cache, slot0 + i, return_weights)
            if keep is None:
                x = x + a
                x = x + blk.mlp(x)
            else:
                x = x + keep[i] * a
                x = x + keep[i] * blk.mlp(x)
            weights.append(w)
        return self.norm_f(x), weights


class ICLPolicy(nn.Module):
    """Transformer actor-critic with optional Sink-KV attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.trunks = nn.ModuleList([Trunk(cfg)] if cfg.shared_trunk else [Trunk(cfg), Trunk(cfg)])
        self.actor = nn.Linear(cfg.d_model, cfg.action_count)
        self.critic = nn.Linear(cfg.d_model, 1)

    @property
    def dtype(self):
        return self.actor.weight.dtype

    def sink_parameter_count(self) -> int:
        return sum(p.numel() for n, p in self.named_parameters() if "sink" in n.split(".")[-1])

    def init_cache(self, batch: int, capacity: int) -> KVCache:
        cfg = self.cfg
        slots = cfg.n_layers * len(self.trunks)
        shape = (batch, cfg.n_heads, capacity, cfg.d_head)
        return KVCache(
            keys=[torch.zeros(shape, dtype=self.dtype) for _ in range(slots)],
            values=[torch.zeros(shape, dtype=self.dtype) for _ in range(slots)],
            episode_index=torch.zeros(batch, capacity, dtype=torch.long),
            within_pos=torch.zeros(batch, capacity, dtype=torch.long),
        )

    def _check_positions(self, tokens: TokenBatch):
        if len(tokens) and int(tokens.within_pos.max()) >= self.cfg.max_within_episode_len:
            raise ValueError(
                f"within-episode position {int(tokens.within_pos.max())} exceeds "
                f"max_within_episode_len={self.cfg.max_within_episode_len}"
            )

    def _mask(self, q_ep, k_ep, offset):
        """Boolean visibility ``[B|1, 1, n, offset + n]``, or ``None`` when all keys are visible."""
        n, m = q_ep.shape[1], k_ep.shape[1]
        mask = None
        if n > 1:
            mask = torch.ones(n, m, dtype=torch.bool).tril(offset)[None, None]
        if self.cfg.attention_mask == "intra_episode":
            same = (q_ep[:, :, None] == k_ep[:, None, :])[:, None]
            mask = same if mask is None else mask & same
        return mask

    def _run(self, tokens, cache, train_mode, generator, return_attention):
        # Tokens must match the parameter dtype (float64 gradient-check mode).
        tokens = tokens.to(self.dtype)
        self._check_positions(tokens)
        offset = 0 if cache is None else cache.length
        if cache is None:
            k_ep = tokens.episode_index
        else:
            n = len(tokens)
            if offset + n > cache.capacity:
                raise CacheFullError(f"cache holds {offset}/{cache.capacity}; cannot append {n}")
            cache.episode_index[:, offset : offset + n] = tokens.episode_index
            cache.within_pos[:, offset : offset + n] = tokens.within_pos
            k_ep = cache.episode_index[:, : offset + n]
        mask = self._mask(tokens.episode_index, k_ep, offset)
        cos, sin = rope_angles(tokens.episode_index, self.cfg.d_head, self.cfg.rope_base, dtype=self.dtype)
        rope = (cos.unsqueeze(1), sin.unsqueeze(1))

        keep = None
        p = self.cfg.depth_dropout
        if train_mode and p > 0:
            draws = torch.rand(len(self.trunks), self.cfg.n_layers, tokens.batch_size, generator=generator)
            keep = ((draws >= p).to(self.dtype) / (1.0 - p))[..., None, None]

        hidden = []
        attention = None
        for t, trunk in enumerate(self.trunks):
            h, w = trunk(
                tokens,
                mask,
                rope,
                cache,
                slot0=t * self.cfg.n_layers,
                keep=None if keep is None else keep[t],
                return_weights=return_attention and t == 0,
            )
            hidden.append(h)
            if t == 0 and return_attention:
                attention = w
        logits = self.actor(hidden[0])
        value = self.critic(hidden[-1]).squeeze(-1)
        return PolicyOutput(logits, value, attention)

    def forward_sequence(
        self,
        tokens: TokenBatch,
        train_mode: bool = False,
        generator: torch.Generator | None = None,
        return_attention: bool = False,
    ) -> PolicyOutput:
        """Outputs for every position of ``tokens``; position ``t`` sees only ``1..t``.

        Depth dropout is active only with ``train_mode``.
        """
        return self._run(tokens, None, train_mode, generator, return_attention)

    def forward_incremental(
        self, cache: KVCache, tokens: TokenBatch, commit: bool = True, return_attention: bool = False
    ) -> tuple[PolicyOutput, KVCache]:
        """Process ``tokens`` (usually one step) on top of ``cache``.

        Keys/values are written at ``cache.length``; with ``commit`` the length
        advances, otherwise the call is a peek and the rows are overwritten by
        the next write.
        """
        if cache.length + len(tokens) > cache.capacity:
            raise CacheFullError(f"cache full ({cache.length}/{cache.capacity})")
        with torch.no_grad():
            out = self._run(tokens, cache, False, None, return_attention)
        if commit:
            cache.length += len(tokens)
        return out, cache

    def build_cache(self, tokens: TokenBatch, capacity: int) -> KVCache:
        """Fresh cache holding ``tokens`` as if fed one at a time with the current parameters."""
        cache = self.init_cache(tokens.batch_size, capacity)
        if len(tokens):
            self.forward_incremental(cache, tokens)
        return cache


def _init_weights(model: ICLPolicy, gen: torch.Generator):
    cfg = model.cfg
    out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    for name, p in model.named_parameters():
        leaf = name.split(".")[-1]
        with torch.no_grad():
            if "norm" in name:
                p.fill_(1.0)
            elif leaf == "bias":
                p.zero_()
            elif "sink" in leaf:
                p.normal_(0.0, 0.02, generator=gen)
            elif name.endswith("pos_table") or "action_emb" in name:
                p.normal_(0.0, 0.02, generator=gen)
            elif name.startswith("actor"):
                p.normal_(0.0, 0.01, generator=gen)
            elif name.startswith("critic"):
                p.zero_()
            elif "embed" in name:
                fan_in = p[0].numel()
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
            elif name.endswith(("wo.weight", "fc2.weight")):
                p.normal_(0.0, out_std, generator=gen)
            else:
                p.normal_(0.0, 0.02, generator=gen)


def init_params(cfg: ModelConfig, seed: int) -> ICLPolicy:
    """Deterministically initialized policy for ``(cfg, seed)``."""
    model = ICLPolicy(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    _init_weights(model, gen)
    return model


def gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradient of ``loss`` for every trainable parameter, keyed by parameter name."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(name)
        out[name] = g
    return out
