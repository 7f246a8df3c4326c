"""
Chirurgie de checkpoints Branch-Train-MiX.

    - tronc commun (attention, embeddings, normes, tête) = moyenne arithmétique
      de toutes les sources du plan
    - FFN de chaque source → expert e de chaque couche, dans l'ordre des sources
    - routeurs initialisés à zéro (porte uniforme au premier pas)
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import structlog
import yaml
from pydantic import BaseModel, Field, ValidationError

from btxforge.core.transformer import (
    Checkpoint,
    TransformerModel,
    canonical_shapes,
    is_ffn_tensor,
)
from btxforge.core.tensor import no_grad
from btxforge.errors import CompatibilityError, ConfigValidationError, MergePlanError
from btxforge.utils.config import MoeConfig

logger = structlog.get_logger(__name__)

FFN_PARTS = ("up", "gate", "down")


# ============================================================================
# Compatibilité
# ============================================================================

@dataclass
class CompatibilityReport:
    """Résultat de check_compatibility."""
    passed: bool
    mismatches: List[str] = field(default_factory=list)

    def raise_for_mismatch(self) -> None:
        if not self.passed:
            raise CompatibilityError(self.mismatches)


def check_compatibility(sources: Sequence[Checkpoint]) -> CompatibilityReport:
    """
    Vérifie que des checkpoints peuvent être fusionnés.

    Compare les configurations (hors moe) et les noms/formes de tenseurs
    par rapport à la première source. Ne lève jamais pour une incompatibilité.

    Args:
        sources: Checkpoints candidats

    Returns:
        Rapport listant toutes les différences
    """
    mismatches: List[str] = []
    if len(sources) < 2:
        return CompatibilityReport(passed=False, mismatches=["at least 2 sources are required"])

    reference = sources[0]
    ref_config = reference.config.dense()
    for index, source in enumerate(sources[1:], start=1):
        config = source.config.dense()
        if config != ref_config:
            for key, value in ref_config.model_dump().items():
                other = getattr(config, key)
                if other != value:
                    mismatches.append(f"source {index}: config {key} = {other}, expected {value}")

        names = set(source.tensors)
        ref_names = set(reference.tensors)
        for name in sorted(ref_names - names):
            mismatches.append(f"source {index}: missing tensor {name}")
        for name in sorted(names - ref_names):
            mismatches.append(f"source {index}: unexpected tensor {name}")
        for name in sorted(ref_names & names):
            if source.tensors[name].shape != reference.tensors[name].shape:
                mismatches.append(
                    f"source {index}: tensor {name} shape {source.tensors[name].shape} "
                    f"!= {reference.tensors[name].shape}"
                )

    report = CompatibilityReport(passed=not mismatches, mismatches=mismatches)
    logger.debug("compatibility_checked", sources=len(sources), passed=report.passed)
    return report


# ============================================================================
# Fusion
# ============================================================================

@dataclass
class MergePlan:
    """
    Plan de fusion.

    Attributes:
        sources: Checkpoints denses (branches, puis la base en dernier si incluse)
        include_base_as_expert: La dernière source est le modèle de base
        moe: Configuration MoE cible (n_experts = nombre de sources)
    """
    sources: List[Checkpoint]
    include_base_as_expert: bool
    moe: MoeConfig

    def validate(self) -> None:
        if len(self.sources) < 2:
            raise MergePlanError(f"merge needs >= 2 sources, got {len(self.sources)}")
        if self.moe.n_experts != len(self.sources):
            raise MergePlanError(
                f"n_experts ({self.moe.n_experts}) must equal the number of sources ({len(self.sources)})"
            )
        for source in self.sources:
            if source.config.is_moe:
                raise MergePlanError(f"source {source.metadata!r} is already a MoE model")
        check_compatibility(self.sources).raise_for_mismatch()


def merge_btx(plan: MergePlan) -> Checkpoint:
    """
    Fusionne des checkpoints denses en un modèle MoE.

    Args:
        plan: Plan de fusion valide

    Returns:
        Checkpoint MoE (métadonnées "merged:btx-Nx <sources>")

    Raises:
        MergePlanError: Nombre de sources incohérent
        CompatibilityError: Sources incompatibles
    """
    plan.validate()
    dense_config = plan.sources[0].config
    config = dense_config.with_moe(plan.moe)
    n_sources = len(plan.sources)

    tensors: Dict[str, np.ndarray] = {}
    for name in plan.sources[0].tensors:
        if is_ffn_tensor(name):
            continue
        stacked = np.stack([source.tensors[name] for source in plan.sources])
        tensors[name] = (stacked.sum(axis=0) / n_sources).astype(stacked.dtype)

    dtype = plan.sources[0].dtype
    for layer in range(dense_config.n_layers):
        for e, source in enumerate(plan.sources):
            for part in FFN_PARTS:
                tensors[f"layers.{layer}.moe.expert.{e}.{part}"] = source.tensors[
                    f"layers.{layer}.ffn.{part}"
                ].copy()
        tensors[f"layers.{layer}.moe.router"] = np.zeros(
            canonical_shapes(config)[f"layers.{layer}.moe.router"], dtype=dtype
        )

    provenance = ",".join(source.metadata or f"source{i}" for i, source in enumerate(plan.sources))
    merged = Checkpoint(
        config=config,
        tensors=tensors,
        metadata=f"merged:btx-{n_sources}x [{provenance}]",
    )
    logger.info(
        "merge_completed",
        n_experts=plan.moe.n_experts,
        top_k=plan.moe.top_k,
        include_base=plan.include_base_as_expert,
    )
    return merged


def dense_equivalence(
    merged: Checkpoint,
    dense: Checkpoint,
    n_inputs: int = 100,
    seed: int = 0,
    length: int = 16,
) -> float:
    """
    Écart maximal absolu des logits entre un modèle fusionné et un modèle dense.

    Args:
        merged: Checkpoint MoE
        dense: Checkpoint dense de référence
        n_inputs: Nombre de séquences aléatoires
        seed: Graine des entrées
        length: Longueur des séquences

    Returns:
        max |logits_merged - logits_dense| (passes en float64)
    """
    rng = np.random.default_rng(seed)
    length = min(length, dense.config.max_context)
    tokens = rng.integers(0, dense.config.vocab_size, size=(n_inputs, length))
    merged_model = TransformerModel(merged.astype(np.float64), trainable=False)
    dense_model = TransformerModel(dense.astype(np.float64), trainable=False)
    with no_grad():
        a = merged_model.forward(tokens).logits.data.astype(np.float64)
        b = dense_model.forward(tokens).logits.data.astype(np.float64)
    return float(np.max(np.abs(a - b)))


# ============================================================================
# Manifeste de fusion (CLI)
# ============================================================================

class MergeManifest(BaseModel):
    """Manifeste YAML de la sous-commande merge."""
    sources: List[Path] = Field(min_length=2)
    include_base: bool = False
    top_k: int = Field(default=2, ge=1)
    lb_coeff: float = Field(default=0.01, ge=0.0)
    output: Path

    def moe_config(self) -> MoeConfig:
        return MoeConfig(n_experts=len(self.sources), top_k=self.top_k, lb_coeff=self.lb_coeff)


def load_merge_manifest(path: Union[str, Path], base_dir: Optional[Path] = None) -> MergeManifest:
    """
    Charge un manifeste de fusion; les chemins relatifs sont résolus
    par rapport au dossier du manifeste.

    Raises:
        ConfigValidationError: Fichier illisible ou champ invalide
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        manifest = MergeManifest.model_validate(raw)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigValidationError([f"{path}: {e}"]) from e
    except ValidationError as e:
        raise ConfigValidationError(
            [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        ) from e

    root = base_dir or path.parent
    manifest.sources = [s if s.is_absolute() else root / s for s in manifest.sources]
    if not manifest.output.is_absolute():
        manifest.output = root / manifest.output
    return manifest
