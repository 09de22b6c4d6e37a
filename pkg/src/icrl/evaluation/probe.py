"""Per-head attention-mass profiles: sinks vs. the running episode vs. earlier episodes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..model.policy import ICLPolicy, TokenBatch

ZERO_SINK_MASS = 0.9
INTRA_SHARE = 0.8
INTER_SHARE = 0.5


@dataclass
class HeadAttentionProfile:
    layer: int
    head: int
    sink_mass: float
    current_mass: float
    earlier_mass: float
    classification: str
    top_positions: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def classify_head(sink: float, current: float, earlier: float) -> str:
    if sink > ZERO_SINK_MASS:
        return "zero"
    rest = current + earlier
    if rest > 0 and current / rest > INTRA_SHARE:
        return "intra"
    if rest > 0 and earlier / rest > INTER_SHARE:
        return "inter"
    return "unclassified"


def attention_masses(weights: torch.Tensor, n_sinks: int, episode_index: torch.Tensor, query: int):
    """Split one query row of weights ``[H, s + n]`` into (sink, current, earlier) masses per head."""
    row = weights[:, query]
    keys_ep = episode_index[: row.shape[-1] - n_sinks]
    q_ep = episode_index[query]
    sink = row[:, :n_sinks].sum(-1)
    inputs = row[:, n_sinks:]
    current = inputs[:, keys_ep == q_ep].sum(-1)
    earlier = inputs[:, keys_ep < q_ep].sum(-1)
    return sink, current, earlier


def attention_probe(
    model: ICLPolicy,
    tokens: TokenBatch,
    query_steps,
    top_k: int = 5,
) -> list[HeadAttentionProfile]:
    """Profile every head of the actor trunk on one recorded trial (``tokens`` is ``[1, n]``).

    ``query_steps`` is an int or an iterable of ints; masses are averaged over them.
    """
    n = len(tokens)
    steps = [int(query_steps)] if np.isscalar(query_steps) else [int(q) for q in query_steps]
    if not steps or min(steps) < 0 or max(steps) >= n:
        raise IndexError(f"query steps {steps} out of range for a trial of {n} steps")
    with torch.no_grad():
        out = model.forward_sequence(tokens, return_attention=True)
    s = model.cfg.sink_count
    ep = tokens.episode_index[0]
    profiles = []
    for layer, w in enumerate(out.attention):
        w = w[0].double()  # [H, n, s + n]
        sinks, cur, earl = [], [], []
        for q in steps:
            a, b, c = attention_masses(w, s, ep, q)
            sinks.append(a)
            cur.append(b)
            earl.append(c)
        sink, current, earlier = (torch.stack(x).mean(0) for x in (sinks, cur, earl))
        last = w[:, steps[-1], s:]
        for h in range(w.shape[0]):
            k = min(top_k, steps[-1] + 1)
            top = torch.topk(last[h, : steps[-1] + 1], k).indices.tolist()
            sm, cm, em = float(sink[h]), float(current[h]), float(earlier[h])
            profiles.append(HeadAttentionProfile(layer, h, sm, cm, em, classify_head(sm, cm, em), top))
    return profiles
