"""
Adaptateurs LoRA: initialisation et repli dans les poids denses.

W' = W + (alpha / r) · B · A, avec A [r × d_in] et B [d_out × r].
"""

from dataclasses import dataclass
from fnmatch import fnmatch
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np
import structlog

from btxforge.core.transformer import Checkpoint, is_router
from btxforge.errors import AdapterError
from btxforge.utils.config import LoraConfig

logger = structlog.get_logger(__name__)


@dataclass
class LoraAdapter:
    """Adaptateur de rang faible pour un poids [d_out × d_in]."""
    a: np.ndarray
    b: np.ndarray
    alpha: float
    rank: int

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise AdapterError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise AdapterError("LoRA factors must be matrices")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise AdapterError(
                f"factor shapes A{self.a.shape} B{self.b.shape} do not match rank {self.rank}"
            )

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def target_shape(self) -> Tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    def delta(self) -> np.ndarray:
        return self.scaling * (self.b @ self.a)


def lora_targets(checkpoint: Checkpoint, patterns: Sequence[str]) -> list:
    """Poids 2-D dont le nom correspond à un motif (routeurs exclus)."""
    return [
        name
        for name, array in sorted(checkpoint.tensors.items())
        if array.ndim == 2 and not is_router(name) and any(fnmatch(name, p) for p in patterns)
    ]


def init_adapters(checkpoint: Checkpoint, lora: LoraConfig, seed: int) -> Dict[str, LoraAdapter]:
    """
    Crée les adaptateurs d'un checkpoint.

    A ~ N(0, 1/d_in) (écart-type 1/sqrt(d_in)), B = 0: la mise à jour
    initiale est nulle.

    Args:
        checkpoint: Modèle de base
        lora: Rang, alpha et motifs cibles
        seed: Graine

    Returns:
        Nom du poids cible → adaptateur
    """
    rng = np.random.default_rng(seed)
    dtype = checkpoint.dtype
    adapters: Dict[str, LoraAdapter] = {}
    for name in lora_targets(checkpoint, lora.targets):
        d_out, d_in = checkpoint.tensors[name].shape
        rank = min(lora.rank, d_out, d_in)
        adapters[name] = LoraAdapter(
            a=rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in)).astype(dtype),
            b=np.zeros((d_out, rank), dtype=dtype),
            alpha=lora.alpha * rank / lora.rank,
            rank=rank,
        )
    if not adapters:
        raise AdapterError(f"no tensor matches LoRA targets {list(lora.targets)}")
    logger.debug("lora_adapters_initialized", count=len(adapters), rank=lora.rank, alpha=lora.alpha)
    return adapters


def materialize_lora(base: Checkpoint, adapters: Mapping[str, LoraAdapter]) -> Checkpoint:
    """
    Replie les adaptateurs dans un checkpoint dense.

    Raises:
        AdapterError: Poids cible inconnu ou formes incohérentes
    """
    tensors = {name: array.copy() for name, array in base.tensors.items()}
    for name, adapter in sorted(adapters.items()):
        if name not in tensors:
            raise AdapterError(f"adapter targets unknown weight {name}")
        if tensors[name].shape != adapter.target_shape:
            raise AdapterError(
                f"adapter for {name} has shape {adapter.target_shape}, weight is {tensors[name].shape}"
            )
        weight = tensors[name]
        tensors[name] = (weight + adapter.delta().astype(weight.dtype)).astype(weight.dtype)

    logger.info("lora_materialized", adapters=len(adapters), metadata=base.metadata)
    return Checkpoint(config=base.config, tensors=tensors, metadata=base.metadata)
