"""In-context RL workbench: Sink-KV transformer policies trained with partial-update PPO."""

__version__ = "0.1.0"
