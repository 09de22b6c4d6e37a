from .probe import HeadAttentionProfile, attention_masses, attention_probe, classify_head
from .trials import (
    ContextCapacityError,
    TrialMetrics,
    TrialRun,
    context_generalization_eval,
    encode_demonstrations,
    eval_trial_specs,
    evaluate_trial,
    few_shot_imitation_eval,
    random_policy_return,
    run_trials,
)

__all__ = [
    "ContextCapacityError",
    "HeadAttentionProfile",
    "TrialMetrics",
    "TrialRun",
    "attention_masses",
    "attention_probe",
    "classify_head",
    "context_generalization_eval",
    "encode_demonstrations",
    "eval_trial_specs",
    "evaluate_trial",
    "few_shot_imitation_eval",
    "random_policy_return",
    "run_trials",
]
