"""
BTXForge - Branch-Train-MiX pour l'arabe égyptien en double écriture.

Laboratoire à l'échelle d'un poste de travail: des experts denses spécialisés
par écriture (arabe, Arabizi) sont entraînés en branches, fusionnés en un
modèle Mixture-of-Experts top-k par chirurgie de checkpoints, puis ajustés
(SFT, DPO) et évalués, routage compris.

Architecture:
    - core: autodiff NumPy, transformer octet, couche MoE, format BTXF
    - data: corpus synthétiques, translittération, gabarits d'instructions
    - merge: fusion BTX, adaptateurs LoRA
    - training: AdamW, pertes LM/SFT/DPO, paires de préférence
    - evaluation: choix multiples, BLEU/chrF, spécialisation du routage
    - pipeline: orchestration reproductible et manifeste d'artefacts
"""

__version__ = "0.1.0"

from btxforge.core.transformer import Checkpoint, TransformerModel, init_model
from btxforge.merge.btx import MergePlan, merge_btx
from btxforge.utils.config import ExperimentConfig, load_config

__all__ = [
    "__version__",
    "Checkpoint",
    "ExperimentConfig",
    "MergePlan",
    "TransformerModel",
    "init_model",
    "load_config",
    "merge_btx",
]
