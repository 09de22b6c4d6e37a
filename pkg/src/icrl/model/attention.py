"""Attention with learnable key/value sinks, and episode-index rotary encoding.

Shapes follow the ``[..., seq, d_head]`` convention: leading dimensions are
broadcast (batch, heads). Sinks are prepended to the keys and values; queries
are untouched, so the output keeps the query length.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import SINK_VARIANTS


def resolve_sinks(
    variant: str,
    k_sink: torch.Tensor | None,
    v_sink: torch.Tensor | None,
    like: torch.Tensor,
) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """Return the effective ``(K_s, V_s)`` for ``variant``.

    Zeroed halves are materialized so callers can always concatenate. ``like``
    supplies dtype, device and the trailing head dimension.
    """
    if variant not in SINK_VARIANTS:
        raise ValueError(f"unknown sink variant {variant!r}")
    if variant == "none":
        if (k_sink is not None and k_sink.shape[-2]) or (v_sink is not None and v_sink.shape[-2]):
            raise ValueError("variant 'none' takes no sinks")
        return None, None
    if variant == "sink_k0v0":
        z = like.new_zeros(like.shape[-1]).expand(*like.shape[:-2], 1, like.shape[-1])
        return z, z
    ref = k_sink if k_sink is not None else v_sink
    if ref is None:
        raise ValueError(f"variant {variant!r} needs sink vectors")
    if variant in ("sink_kv0", "sink_kv", "sink_token") and k_sink is None:
        raise ValueError(f"variant {variant!r} needs K_s")
    if variant in ("sink_k0v", "sink_kv", "sink_token") and v_sink is None:
        raise ValueError(f"variant {variant!r} needs V_s")
    if variant == "sink_kv0":
        v_sink = torch.zeros_like(k_sink)
    elif variant == "sink_k0v":
        k_sink = torch.zeros_like(v_sink)
    if k_sink.shape != v_sink.shape:
        raise ValueError(f"sink shapes differ: {tuple(k_sink.shape)} vs {tuple(v_sink.shape)}")
    return k_sink, v_sink


def _check(q, k, v, k_sink, v_sink):
    if q.shape[-1] != k.shape[-1] or k.shape[-2:] != v.shape[-2:]:
        raise ValueError(f"shape mismatch: Q{tuple(q.shape)} K{tuple(k.shape)} V{tuple(v.shape)}")
    if k_sink is not None and k_sink.shape[-1] != q.shape[-1]:
        raise ValueError(f"sink width {k_sink.shape[-1]} != head width {q.shape[-1]}")


def sink_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    k_sink: torch.Tensor | None = None,
    v_sink: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    variant: str = "sink_kv",
    *,
    scale: float | None = None,
    return_weights: bool = False,
    check_finite: bool = False,
):
    """Scaled dot-product attention over ``sinks ∪ visible inputs``.

    ``mask`` is boolean, ``True`` where a query may see a key, shape broadcastable
    to ``[..., n_q, n_k]``; ``None`` means every key is visible. Sinks are always
    visible. With ``return_weights`` the explicit softmax path runs and the
    weights over ``s + n_k`` slots (sinks first) are returned too.
    """
    _check(q, k, v, k_sink, v_sink)
    if check_finite:
        for name, t in (("Q", q), ("K", k), ("V", v), ("K_s", k_sink), ("V_s", v_sink)):
            if t is not None and not torch.isfinite(t).all():
                raise ValueError(f"non-finite values in {name}")
    k_sink, v_sink = resolve_sinks(variant, k_sink, v_sink, q)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    if k_sink is None:
        if not return_weights:
            return F.scaled_dot_product_attention(q, k, v, attn_mask=mask, scale=scale)
        logits = (q @ k.transpose(-1, -2)) * scale
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        return weights @ v, weights

    if q.shape[-2] == 1 or return_weights:
        # Explicit path: sink logits are scored separately so the (possibly
        # long) cached keys are never copied.
        logits = (q @ k.transpose(-1, -2)) * scale
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        sink_logits = (q @ k_sink.transpose(-1, -2)) * scale
        s = k_sink.shape[-2]
        weights = torch.softmax(torch.cat([sink_logits.expand(*logits.shape[:-1], s), logits], dim=-1), dim=-1)
        out = weights[..., s:] @ v + weights[..., :s] @ v_sink
        return (out, weights) if return_weights else out

    lead = torch.broadcast_shapes(k.shape[:-2], k_sink.shape[:-2])
    s = k_sink.shape[-2]
    k = torch.cat([k_sink.expand(*lead, s, k.shape[-1]), k.expand(*lead, *k.shape[-2:])], dim=-2)
    v = torch.cat([v_sink.expand(*lead, s, v.shape[-1]), v.expand(*lead, *v.shape[-2:])], dim=-2)
    if mask is not None:
        mask = F.pad(mask, (s, 0), value=True)
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask, scale=scale)


def softmax_one(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """``exp(x_i) / (1 + sum_j exp(x_j))``, computed stably."""
    m = x.amax(dim=dim, keepdim=True).clamp_min(0.0)
    e = torch.exp(x - m)
    return e / (torch.exp(-m) + e.sum(dim=dim, keepdim=True))


def rope_angles(episode_index: torch.Tensor, d_head: int, base: float = 10000.0, dtype=torch.float32):
    """Return ``(cos, sin)`` of shape ``[*episode_index.shape, d_head // 2]``."""
    if d_head % 2:
        raise ValueError(f"rotary encoding needs an even head width, got {d_head}")
    inv_freq = base ** (-torch.arange(0, d_head, 2, dtype=torch.float64) / d_head)
    ang = episode_index.to(torch.float64).unsqueeze(-1) * inv_freq
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` by the given angles."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def apply_rope_episode(x: torch.Tensor, episode_indices: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotary encoding of ``x`` ``[n, d_head]`` by each row's episode index."""
    cos, sin = rope_angles(episode_indices, x.shape[-1], base, dtype=x.dtype)
    return apply_rope(x, cos, sin)
