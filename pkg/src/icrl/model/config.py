"""Model configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

SINK_VARIANTS = ("none", "sink_k0v0", "sink_kv0", "sink_k0v", "sink_kv", "sink_token")
ATTENTION_MASKS = ("full", "intra_episode")


class ConfigError(ValueError):
    """Raised for invalid configuration values; ``field`` names the offending path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ObsSpec:
    """Observation components fed to the token embedding.

    ``state_dim`` is the length of the real-valued state vector (0 disables it);
    ``image_shape`` is ``(H, W, C)`` for pixel observations, or ``None``.
    """

    state_dim: int = 2
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.image_shape is not None:
            self.image_shape = tuple(int(v) for v in self.image_shape)


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 8
    d_model: int = 64
    d_mlp: int = 256
    n_sinks: int = 1
    sink_variant: str = "sink_k0v0"
    rope_base: float = 10000.0
    max_within_episode_len: int = 100
    depth_dropout: float = 0.1
    action_count: int = 5
    obs_spec: ObsSpec = field(default_factory=ObsSpec)
    attention_mask: str = "full"
    shared_trunk: bool = True

    def __post_init__(self):
        if isinstance(self.obs_spec, dict):
            self.obs_spec = ObsSpec(**self.obs_spec)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def learned_sink_keys(self) -> bool:
        return self.sink_variant in ("sink_kv", "sink_kv0")

    @property
    def learned_sink_values(self) -> bool:
        return self.sink_variant in ("sink_kv", "sink_k0v")

    @property
    def sink_count(self) -> int:
        """Number of sink slots each attention call prepends."""
        if self.sink_variant == "none":
            return 0
        if self.sink_variant == "sink_k0v0":
            return 1
        return self.n_sinks

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "n_heads", "d_model", "d_mlp", "action_count", "max_within_episode_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}", "must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model", f"{self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ConfigError("model.d_model", "per-head dimension must be even for rotary encoding")
        if self.sink_variant not in SINK_VARIANTS:
            raise ConfigError("model.sink_variant", f"unknown variant {self.sink_variant!r}")
        if self.attention_mask not in ATTENTION_MASKS:
            raise ConfigError("model.attention_mask", f"unknown mask {self.attention_mask!r}")
        if self.n_sinks < 0:
            raise ConfigError("model.n_sinks", "must be >= 0")
        if self.sink_variant == "none" and self.n_sinks != 0:
            raise ConfigError("model.n_sinks", "variant 'none' requires n_sinks = 0")
        if self.sink_variant not in ("none", "sink_k0v0") and self.n_sinks < 1:
            raise ConfigError("model.n_sinks", f"variant {self.sink_variant!r} requires n_sinks >= 1")
        if not 0.0 <= self.depth_dropout < 1.0:
            raise ConfigError("model.depth_dropout", "must be in [0, 1)")
        if self.rope_base <= 0:
            raise ConfigError("model.rope_base", "must be positive")
        spec = self.obs_spec
        if spec.state_dim < 0 or (spec.state_dim == 0 and spec.image_shape is None):
            raise ConfigError("model.obs_spec", "needs a state vector or an image component")
        if spec.image_shape is not None and (len(spec.image_shape) != 3 or min(spec.image_shape) < 1):
            raise ConfigError("model.obs_spec.image_shape", "expected (H, W, C)")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if d["obs_spec"]["image_shape"] is not None:
            d["obs_spec"]["image_shape"] = list(d["obs_spec"]["image_shape"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["obs_spec"] = ObsSpec(**d.get("obs_spec", {}))
        return cls(**d)
