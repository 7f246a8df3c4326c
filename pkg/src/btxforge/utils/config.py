"""
Gestion de la configuration BTXForge.

Charge et valide la configuration d'expérience depuis fichiers YAML.
Les profils nommés (desk-scale, paper-*) sont livrés avec le package.
"""

from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

PROFILE_NAMES = ("desk-scale", "paper-cpt", "paper-sft", "paper-moe-sft", "paper-dpo")


# ============================================================================
# Architecture
# ============================================================================

class MoeConfig(BaseModel):
    """Configuration d'une couche Mixture-of-Experts."""
    model_config = ConfigDict(frozen=True)

    n_experts: int = Field(ge=1)
    top_k: int = Field(ge=1)
    lb_coeff: float = Field(default=0.01, ge=0.0)

    @model_validator(mode="after")
    def _top_k_within_experts(self) -> "MoeConfig":
        if self.top_k > self.n_experts:
            raise ValueError(
                f"top_k ({self.top_k}) must not exceed n_experts ({self.n_experts})"
            )
        return self


class ModelConfig(BaseModel):
    """Architecture du transformer décodeur (valeurs par défaut: desk-scale)."""
    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(default=2, ge=1)
    d_model: int = Field(default=64, ge=2)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=128, ge=1)
    vocab_size: int = Field(default=260, ge=260)
    max_context: int = Field(default=256, ge=1)  # 2048 à l'échelle publiée
    rope_base: float = Field(default=10000.0, gt=0.0)
    norm_eps: float = Field(default=1e-6, ge=0.0)
    moe: Optional[MoeConfig] = None

    @model_validator(mode="after")
    def _heads_divide_model(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary encoding")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def is_moe(self) -> bool:
        return self.moe is not None

    def dense(self) -> "ModelConfig":
        """Même architecture sans couche MoE."""
        return self.model_copy(update={"moe": None})

    def with_moe(self, moe: MoeConfig) -> "ModelConfig":
        return self.model_copy(update={"moe": moe})


# ============================================================================
# Entraînement
# ============================================================================

class ScheduleKind(str, Enum):
    """Forme de décroissance après le warmup."""
    COSINE = "cosine"
    LINEAR = "linear"


class OptimConfig(BaseModel):
    """Optimiseur AdamW + planning du learning rate."""

    peak_lr: float = Field(ge=0.0)
    warmup_ratio: float = Field(default=0.0, ge=0.0, le=1.0)
    schedule: ScheduleKind = ScheduleKind.COSINE
    final_lr: float = Field(default=0.0, ge=0.0)  # cible du cosinus; linéaire → 0
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    effective_batch: int = Field(default=8, ge=1)
    micro_batch: int = Field(default=8, ge=1)
    epochs: float = Field(default=1.0, gt=0.0)
    steps: Optional[int] = Field(default=None, ge=1)
    seq_len: int = Field(default=64, ge=2)

    @model_validator(mode="after")
    def _micro_divides_effective(self) -> "OptimConfig":
        if self.effective_batch % self.micro_batch != 0:
            raise ValueError(
                f"micro_batch ({self.micro_batch}) must divide effective_batch "
                f"({self.effective_batch})"
            )
        return self

    @property
    def accumulation_steps(self) -> int:
        return self.effective_batch // self.micro_batch


class LoraConfig(BaseModel):
    """Adaptateurs LoRA."""

    rank: int = Field(ge=1)
    alpha: float = Field(gt=0.0)
    targets: List[str] = Field(default_factory=lambda: [
        "layers.*.attn.*",
        "layers.*.ffn.*",
        "layers.*.moe.expert.*",
    ])

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class DpoConfig(BaseModel):
    """Alignement DPO."""

    beta: float = Field(default=0.5, gt=0.0)
    lr: float = Field(default=3e-6, ge=0.0)
    full_finetune: bool = True
    on_policy_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    temperature: float = Field(default=1.0, gt=0.0)
    max_new_tokens: int = Field(default=48, ge=1)
    search: bool = False  # grille lr × beta × (complet, LoRA)


# Préréglages publiés (les époques sont ramenées en pas à l'échelle du bureau)
OPTIM_PRESETS: Dict[str, OptimConfig] = {
    "paper-cpt": OptimConfig(
        peak_lr=8e-6, warmup_ratio=0.01, schedule=ScheduleKind.COSINE, final_lr=1e-6,
        beta1=0.9, beta2=0.95, epochs=1,
    ),
    "paper-anneal": OptimConfig(
        peak_lr=3e-4, warmup_ratio=0.0, schedule=ScheduleKind.COSINE, final_lr=0.0,
        beta1=0.9, beta2=0.95, epochs=1,
    ),
    "paper-sft": OptimConfig(
        peak_lr=3e-5, warmup_ratio=0.03, schedule=ScheduleKind.LINEAR,
        beta1=0.9, beta2=0.999, effective_batch=128, micro_batch=8, epochs=2,
    ),
    "paper-moe-sft": OptimConfig(
        peak_lr=1e-4, warmup_ratio=0.03, schedule=ScheduleKind.LINEAR,
        beta1=0.9, beta2=0.999, effective_batch=256, micro_batch=8, epochs=2,
    ),
    "paper-dpo": OptimConfig(
        peak_lr=3e-6, warmup_ratio=0.0, schedule=ScheduleKind.LINEAR,
        beta1=0.9, beta2=0.999, effective_batch=8, micro_batch=8, epochs=1,
    ),
}

LORA_PRESETS: Dict[str, LoraConfig] = {
    "paper": LoraConfig(rank=256, alpha=128),
    "paper-moe": LoraConfig(rank=256, alpha=512),
}


def optim_preset(name: str) -> OptimConfig:
    """Copie d'un préréglage d'optimiseur nommé."""
    if name not in OPTIM_PRESETS:
        raise KeyError(f"unknown optimizer preset: {name}")
    return OPTIM_PRESETS[name].model_copy()


class StagePreset(BaseModel):
    """Réglages d'une étape d'entraînement."""

    optim: OptimConfig
    lora: Optional[LoraConfig] = None
    dpo: Optional[DpoConfig] = None


class StagesConfig(BaseModel):
    """Réglages de toutes les étapes."""

    base: StagePreset
    cpt: StagePreset
    anneal: StagePreset
    sft: StagePreset
    dpo: StagePreset

    @model_validator(mode="after")
    def _dpo_section_present(self) -> "StagesConfig":
        if self.dpo.dpo is None:
            raise ValueError("stages.dpo requires a 'dpo' section (beta, lr)")
        return self


# ============================================================================
# Données, fusion, évaluation
# ============================================================================

class BranchSpec(BaseModel):
    """Branche spécialisée par écriture."""

    name: str
    latin_ratio: float = Field(ge=0.0, le=1.0)


class DataConfig(BaseModel):
    """Génération des corpus synthétiques."""

    seed: int
    latin_ratio: float = Field(default=0.25, ge=0.0, le=1.0)
    branches: List[BranchSpec] = Field(default_factory=lambda: [
        BranchSpec(name="arabic", latin_ratio=0.0),
        BranchSpec(name="latin", latin_ratio=1.0),
    ])
    branch_sentences: int = Field(default=1500, ge=1)
    anneal_sentences: int = Field(default=300, ge=1)
    base_sentences: int = Field(default=1000, ge=1)
    noise_level: float = Field(default=0.1, ge=0.0, le=1.0)
    anneal_noise_level: float = Field(default=0.0, ge=0.0, le=1.0)
    sft_examples: int = Field(default=300, ge=1)
    english_sft_fraction: float = Field(default=0.1, ge=0.0, le=1.0)
    chat_examples: int = Field(default=120, ge=1)
    heldout_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    eval_sentences: int = Field(default=60, ge=1)


class MergeVariant(BaseModel):
    """Variante de fusion BTX (2x: branches; 3x: branches + base)."""

    name: str
    n_experts: int = Field(ge=2)
    top_k: int = Field(ge=1)
    lb_coeff: float = Field(default=0.01, ge=0.0)
    include_base: bool = False

    @model_validator(mode="after")
    def _top_k_within_experts(self) -> "MergeVariant":
        if self.top_k > self.n_experts:
            raise ValueError(
                f"top_k ({self.top_k}) must not exceed n_experts ({self.n_experts})"
            )
        return self

    def moe_config(self) -> MoeConfig:
        return MoeConfig(n_experts=self.n_experts, top_k=self.top_k, lb_coeff=self.lb_coeff)


class MergeConfig(BaseModel):
    """Fusion des branches."""

    variants: List[MergeVariant] = Field(default_factory=lambda: [
        MergeVariant(name="2x", n_experts=2, top_k=2),
        MergeVariant(name="3x", n_experts=3, top_k=2, include_base=True),
    ])
    dense_check_inputs: int = Field(default=100, ge=1)


class EvalConfig(BaseModel):
    """Évaluation et analyse du routage."""

    suite: Optional[Path] = None
    mc_examples: int = Field(default=40, ge=2)
    generation_examples: int = Field(default=10, ge=1)
    max_new_tokens: int = Field(default=64, ge=1)
    temperature: float = Field(default=0.0, ge=0.0)  # 0 = glouton
    routing_sentences: int = Field(default=40, ge=1)


class LoggingConfig(BaseModel):
    """Configuration du logging."""
    level: str = "INFO"
    format: str = "json"  # json, console
    output: Optional[str] = None


class ExperimentConfig(BaseSettings):
    """Configuration complète d'une expérience."""

    model_config = SettingsConfigDict(env_prefix="BTXFORGE_", env_nested_delimiter="__")

    name: str = "experiment"
    seed: int
    model: ModelConfig = Field(default_factory=ModelConfig)
    stages: StagesConfig
    data: DataConfig
    merge: MergeConfig = Field(default_factory=MergeConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: Path = Path("runs/experiment")
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="after")
    def _variants_match_branches(self) -> "ExperimentConfig":
        if self.model.moe is not None:
            raise ValueError("model must describe the dense base; MoE comes from merge.variants")
        n_branches = len(self.data.branches)
        for variant in self.merge.variants:
            expected = n_branches + int(variant.include_base)
            if variant.n_experts != expected:
                raise ValueError(
                    f"merge variant {variant.name}: n_experts ({variant.n_experts}) must equal "
                    f"{expected} (branches + base)"
                )
        return self


# ============================================================================
# Chargement
# ============================================================================

def resolve_config_path(name_or_path: Union[str, Path]) -> Path:
    """
    Résout un chemin ou un nom de profil livré.

    Args:
        name_or_path: Chemin YAML ou nom de profil (desk-scale, paper-*)

    Returns:
        Chemin du fichier
    """
    path = Path(name_or_path)
    if path.exists():
        return path
    if str(name_or_path) in PROFILE_NAMES:
        return Path(str(resources.files("btxforge") / "profiles" / f"{name_or_path}.yaml"))
    return path


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Charge la configuration depuis un fichier YAML.

    Args:
        path: Chemin YAML ou nom de profil

    Returns:
        Configuration validée
    """
    with open(resolve_config_path(path), "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)

    return ExperimentConfig(**(data or {}))


def save_config(config: ExperimentConfig, path: Path) -> None:
    """
    Sauvegarde la configuration dans un fichier YAML.

    Args:
        config: Configuration à sauvegarder
        path: Chemin de destination
    """
    data = config.model_dump(mode="json")

    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(data, f, default_flow_style=False, allow_unicode=True, sort_keys=True)


class ConfigReport(BaseModel):
    """Résultat de validation d'un fichier de configuration."""

    path: str
    valid: bool
    messages: List[str] = Field(default_factory=list)


def _line_for(root: Optional[yaml.Node], loc: Tuple[Any, ...]) -> Optional[int]:
    """Ligne (1-indexée) du nœud YAML le plus profond atteint par `loc`."""
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == str(part)), None)
            if match is None:
                break
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            if part >= len(node.value):
                break
            node = node.value[part]
        else:
            break
        line = node.start_mark.line + 1
    return line


def validate_config(path: Union[str, Path]) -> ConfigReport:
    """
    Validation structurelle et des invariants, messages ancrés sur les lignes.

    Ne lève jamais: les erreurs de lecture et de syntaxe sont rapportées.
    """
    resolved = resolve_config_path(path)
    try:
        text = resolved.read_text(encoding="utf-8")
    except OSError as e:
        return ConfigReport(path=str(resolved), valid=False, messages=[f"cannot read file: {e}"])

    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        return ConfigReport(path=str(resolved), valid=False, messages=[f"{where}parse error: {e}"])

    if not isinstance(data, dict):
        return ConfigReport(
            path=str(resolved), valid=False, messages=["line 1: top level must be a mapping"]
        )

    try:
        ExperimentConfig(**data)
    except ValidationError as e:
        messages = []
        for error in e.errors():
            loc = tuple(error["loc"])
            line = _line_for(root, loc)
            field = ".".join(str(p) for p in loc) or "<root>"
            messages.append(f"line {line}: {field}: {error['msg']}")
        return ConfigReport(path=str(resolved), valid=False, messages=messages)

    return ConfigReport(path=str(resolved), valid=True)
