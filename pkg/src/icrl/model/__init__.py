from .attention import apply_rope_episode, resolve_sinks, sink_attention, softmax_one
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import SINK_VARIANTS, ConfigError, ModelConfig, ObsSpec
from .policy import (
    NO_ACTION,
    CacheFullError,
    ICLPolicy,
    KVCache,
    NonFiniteGradientError,
    PolicyOutput,
    TokenBatch,
    TokenInput,
    gradients,
    init_params,
)

__all__ = [
    "SINK_VARIANTS",
    "NO_ACTION",
    "CacheFullError",
    "CheckpointError",
    "ConfigError",
    "ICLPolicy",
    "KVCache",
    "ModelConfig",
    "NonFiniteGradientError",
    "ObsSpec",
    "PolicyOutput",
    "TokenBatch",
    "TokenInput",
    "apply_rope_episode",
    "gradients",
    "init_params",
    "load_checkpoint",
    "resolve_sinks",
    "save_checkpoint",
    "sink_attention",
    "softmax_one",
]
