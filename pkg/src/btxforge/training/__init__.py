"""
Entraînement: CPT, annealing, SFT, DPO.
"""

from btxforge.training.losses import (
    DpoTerms,
    dpo_loss,
    dpo_terms,
    lm_loss,
    preference_loss,
    sequence_logprob,
    sft_loss,
)
from btxforge.training.optim import AdamState, adamw_step, lr_schedule
from btxforge.training.preference import PairMode, build_preference_pairs, preference_accuracy
from btxforge.training.trainer import (
    DpoCandidate,
    DpoSearchResult,
    LossCurve,
    LossRecord,
    Stage,
    Trainer,
    accumulate_gradients,
    dpo_hyperparameter_search,
    token_windows,
    train_stage,
)

__all__ = [
    "AdamState",
    "DpoCandidate",
    "DpoSearchResult",
    "DpoTerms",
    "LossCurve",
    "LossRecord",
    "PairMode",
    "Stage",
    "Trainer",
    "accumulate_gradients",
    "adamw_step",
    "build_preference_pairs",
    "dpo_hyperparameter_search",
    "dpo_loss",
    "dpo_terms",
    "lm_loss",
    "lr_schedule",
    "preference_accuracy",
    "preference_loss",
    "sequence_logprob",
    "sft_loss",
    "token_windows",
    "train_stage",
]
