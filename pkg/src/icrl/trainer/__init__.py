from .loop import TrainConfig, Trainer, sample_actions, trial_seeds
from .ppo import NonFiniteLossError, categorical_entropy, compute_gae, normalize_advantages, ppo_loss
from .schedule import UpdateWindow, lr_schedule, partial_update_schedule

__all__ = [
    "NonFiniteLossError",
    "TrainConfig",
    "Trainer",
    "UpdateWindow",
    "categorical_entropy",
    "compute_gae",
    "lr_schedule",
    "normalize_advantages",
    "partial_update_schedule",
    "ppo_loss",
    "sample_actions",
    "trial_seeds",
]
