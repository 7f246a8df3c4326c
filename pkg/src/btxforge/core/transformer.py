"""
Transformer décodeur au niveau octet.

Blocs pré-norm:
    h = h + attn(rms_norm(h, norm1))
    h = h + ffn(rms_norm(h, norm2))     (ou couche MoE)
    logits = h · head.outᵀ

Noms canoniques des paramètres:
    embed.tok [V × d], head.out [V × d]
    layers.{i}.norm1.gain, layers.{i}.norm2.gain [d]
    layers.{i}.attn.{q,k,v,o} [d × d]
    layers.{i}.ffn.{up,gate} [d_ff × d], layers.{i}.ffn.down [d × d_ff]
    MoE: layers.{i}.moe.expert.{e}.{up,gate,down}, layers.{i}.moe.router [d × N]
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from btxforge.core.layers import FfnWeights, causal_self_attention, gated_ffn
from btxforge.core.moe import RoutingTrace, moe_forward
from btxforge.core.tensor import (
    Tensor,
    add,
    cross_entropy,
    embedding,
    linear,
    matmul,
    mul,
    no_grad,
    reshape,
    rms_norm,
)
from btxforge.core.tokenizer import END, script_labels_for_tokens
from btxforge.errors import (
    ContextOverflowError,
    MetricInputError,
    ModelConfigError,
    TokenRangeError,
)
from btxforge.utils.config import ModelConfig

logger = structlog.get_logger(__name__)

INIT_STD = 0.02

_OUTPUT_PROJECTIONS = (".attn.o", ".ffn.down", ".down")


# ============================================================================
# Checkpoint
# ============================================================================

def canonical_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Noms et formes attendus pour une architecture, triés par nom."""
    d, v, d_ff = config.d_model, config.vocab_size, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.tok": (v, d),
        "head.out": (v, d),
    }
    for i in range(config.n_layers):
        prefix = f"layers.{i}"
        shapes[f"{prefix}.norm1.gain"] = (d,)
        shapes[f"{prefix}.norm2.gain"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{prefix}.attn.{proj}"] = (d, d)
        if config.moe is None:
            shapes[f"{prefix}.ffn.up"] = (d_ff, d)
            shapes[f"{prefix}.ffn.gate"] = (d_ff, d)
            shapes[f"{prefix}.ffn.down"] = (d, d_ff)
        else:
            for e in range(config.moe.n_experts):
                shapes[f"{prefix}.moe.expert.{e}.up"] = (d_ff, d)
                shapes[f"{prefix}.moe.expert.{e}.gate"] = (d_ff, d)
                shapes[f"{prefix}.moe.expert.{e}.down"] = (d, d_ff)
            shapes[f"{prefix}.moe.router"] = (d, config.moe.n_experts)
    return dict(sorted(shapes.items()))


def canonical_names(config: ModelConfig) -> List[str]:
    return list(canonical_shapes(config))


def is_ffn_tensor(name: str) -> bool:
    """Tenseur FFN (dense ou expert) ou routeur: hors du tronc commun."""
    return ".ffn." in name or ".moe." in name


def is_router(name: str) -> bool:
    return name.endswith(".moe.router")


@dataclass
class Checkpoint:
    """
    Carte de tenseurs nommés + configuration d'architecture.

    Attributes:
        config: Architecture
        tensors: Nom canonique → tableau numpy
        metadata: Provenance ("init", "branch:latin", "merged:btx-3x"...)
    """
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    metadata: str = ""

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            ModelConfigError: Nom manquant, en trop, ou forme inattendue
        """
        expected = canonical_shapes(self.config)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise ModelConfigError(f"checkpoint names differ: missing={missing[:5]} extra={extra[:5]}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ModelConfigError(
                    f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}"
                )

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["embed.tok"].dtype

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def canonical_names(self) -> List[str]:
        return canonical_names(self.config)

    def astype(self, dtype: Union[str, np.dtype, type]) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
            metadata=self.metadata,
        )

    def copy(self, metadata: Optional[str] = None) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            metadata=self.metadata if metadata is None else metadata,
        )

    def content_hash(self) -> str:
        """Empreinte sha256 des tenseurs (ordre des noms)."""
        digest = hashlib.sha256()
        for name in sorted(self.tensors):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return digest.hexdigest()


def init_model(config: ModelConfig, seed: int, metadata: str = "init") -> Checkpoint:
    """
    Initialise un modèle.

    Poids ~ N(0, 0.02²), projections de sortie (attn.o, ffn.down, experts down)
    divisées par sqrt(2·n_layers); gains = 1; routeur = 0. Tirages dans l'ordre
    des noms triés.

    Args:
        config: Architecture
        seed: Graine
        metadata: Provenance

    Returns:
        Checkpoint float32
    """
    rng = np.random.default_rng(seed)
    output_std = INIT_STD / np.sqrt(2.0 * config.n_layers)

    tensors: Dict[str, np.ndarray] = {}
    for name, shape in canonical_shapes(config).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif is_router(name):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            std = output_std if name.endswith(_OUTPUT_PROJECTIONS) else INIT_STD
            tensors[name] = rng.normal(0.0, std, size=shape).astype(np.float32)

    logger.debug("model_initialized", seed=seed, parameters=sum(t.size for t in tensors.values()))
    return Checkpoint(config=config, tensors=tensors, metadata=metadata)


# ============================================================================
# Modèle exécutable
# ============================================================================

@dataclass
class ModelOutput:
    """Sortie de la passe avant."""
    logits: Tensor
    aux_loss: Optional[Tensor] = None
    traces: List[RoutingTrace] = field(default_factory=list)


class TransformerModel:
    """
    Enveloppe exécutable d'un checkpoint.

    Les paramètres deviennent des feuilles Tensor. Avec des adaptateurs LoRA,
    le poids effectif est W + (alpha/r)·B·A et seuls A, B (et les routeurs)
    reçoivent un gradient.
    """

    def __init__(
        self,
        checkpoint: Checkpoint,
        trainable: bool = True,
        adapters: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
        lora_scaling: float = 1.0,
    ):
        """
        Args:
            checkpoint: Poids
            trainable: Paramètres avec gradient
            adapters: Nom du poids cible → (A [r × d_in], B [d_out × r])
            lora_scaling: alpha / r
        """
        self.config = checkpoint.config
        self.metadata = checkpoint.metadata
        self.lora_scaling = lora_scaling

        frozen_base = trainable and bool(adapters)
        self.params: Dict[str, Tensor] = {
            name: Tensor(
                array.copy(),
                requires_grad=trainable and (not frozen_base or is_router(name)),
            )
            for name, array in checkpoint.tensors.items()
        }

        self.adapters: Dict[str, Tuple[Tensor, Tensor]] = {}
        for name, (a, b) in (adapters or {}).items():
            if name not in self.params:
                raise ModelConfigError(f"adapter targets unknown tensor {name}")
            self.adapters[name] = (
                Tensor(np.array(a, dtype=checkpoint.dtype), requires_grad=trainable),
                Tensor(np.array(b, dtype=checkpoint.dtype), requires_grad=trainable),
            )

        logger.debug(
            "transformer_model_initialized",
            metadata=self.metadata,
            moe=self.config.is_moe,
            adapters=len(self.adapters),
        )

    # --- Paramètres ---

    def weight(self, name: str) -> Tensor:
        """Poids effectif (avec mise à jour LoRA si adapté)."""
        base = self.params[name]
        if name not in self.adapters:
            return base
        a, b = self.adapters[name]
        return add(base, mul(matmul(b, a), self.lora_scaling))

    def trainable_tensors(self) -> Dict[str, Tensor]:
        """Feuilles entraînables, noms stables (adaptateurs suffixés .lora_a/.lora_b)."""
        out = {n: t for n, t in self.params.items() if t.requires_grad}
        for name, (a, b) in self.adapters.items():
            if a.requires_grad:
                out[f"{name}.lora_a"] = a
                out[f"{name}.lora_b"] = b
        return dict(sorted(out.items()))

    def zero_grad(self) -> None:
        for tensor in self.trainable_tensors().values():
            tensor.zero_grad()

    def to_checkpoint(self, metadata: Optional[str] = None) -> Checkpoint:
        """Poids de base courants (sans repli des adaptateurs)."""
        return Checkpoint(
            config=self.config,
            tensors={n: t.data.copy() for n, t in self.params.items()},
            metadata=self.metadata if metadata is None else metadata,
        )

    # --- Passe avant ---

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ModelConfigError(f"tokens must be [B x T] with T >= 1, got {tokens.shape}")
        if tokens.shape[1] > self.config.max_context:
            raise ContextOverflowError(tokens.shape[1], self.config.max_context)
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise TokenRangeError(
                f"token ids must be in [0, {self.config.vocab_size}), "
                f"got range [{tokens.min()}, {tokens.max()}]"
            )
        return tokens

    def forward(self, tokens: np.ndarray, collect_traces: bool = False) -> ModelOutput:
        """
        Passe avant.

        Args:
            tokens: [B × T] (ou [T])
            collect_traces: Étiquettes d'écriture dans les traces MoE

        Returns:
            logits [B × T × V], perte auxiliaire moyenne sur les couches MoE, traces
        """
        tokens = self._check_tokens(tokens)
        batch, length = tokens.shape
        cfg = self.config

        h = embedding(self.weight("embed.tok"), tokens)

        scripts: Optional[List[str]] = None
        if collect_traces and cfg.moe is not None:
            scripts = [label for row in tokens for label in script_labels_for_tokens(row)]
        sequence_ids = np.repeat(np.arange(batch), length)
        positions = np.tile(np.arange(length), batch)

        aux_terms: List[Tensor] = []
        traces: List[RoutingTrace] = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            x = rms_norm(h, self.weight(f"{p}.norm1.gain"), cfg.norm_eps)
            h = add(h, causal_self_attention(
                x,
                self.weight(f"{p}.attn.q"),
                self.weight(f"{p}.attn.k"),
                self.weight(f"{p}.attn.v"),
                self.weight(f"{p}.attn.o"),
                cfg.n_heads,
                cfg.rope_base,
            ))

            x = rms_norm(h, self.weight(f"{p}.norm2.gain"), cfg.norm_eps)
            if cfg.moe is None:
                h = add(h, gated_ffn(x, self._ffn(f"{p}.ffn")))
                continue

            experts = [self._ffn(f"{p}.moe.expert.{e}") for e in range(cfg.moe.n_experts)]
            out = moe_forward(
                reshape(x, (batch * length, cfg.d_model)),
                experts,
                self.weight(f"{p}.moe.router"),
                cfg.moe,
                scripts=scripts,
                sequence_ids=sequence_ids,
                positions=positions,
                layer=i,
            )
            h = add(h, reshape(out.y, (batch, length, cfg.d_model)))
            aux_terms.append(out.aux_loss)
            traces.append(out.trace)

        logits = linear(h, self.weight("head.out"))

        aux_loss = None
        if aux_terms:
            aux_loss = aux_terms[0]
            for term in aux_terms[1:]:
                aux_loss = add(aux_loss, term)
            aux_loss = mul(aux_loss, 1.0 / len(aux_terms))
        return ModelOutput(logits=logits, aux_loss=aux_loss, traces=traces)

    def _ffn(self, prefix: str) -> FfnWeights:
        return FfnWeights(
            up=self.weight(f"{prefix}.up"),
            gate=self.weight(f"{prefix}.gate"),
            down=self.weight(f"{prefix}.down"),
        )


def _as_model(model: Union[Checkpoint, TransformerModel]) -> TransformerModel:
    if isinstance(model, TransformerModel):
        return model
    return TransformerModel(model, trainable=False)


def forward_logits(model: Union[Checkpoint, TransformerModel], tokens: np.ndarray) -> Tensor:
    """
    Logits [B × T × V] (causaux).

    Raises:
        ContextOverflowError: T > max_context
        TokenRangeError: Identifiant hors vocabulaire
    """
    model = _as_model(model)
    with no_grad():
        return model.forward(tokens).logits


def sequence_nll(model: TransformerModel, ids: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[float, int]:
    """
    Log-vraisemblance négative sommée (forçage enseignant).

    Returns:
        (nll totale, nombre de positions comptées)
    """
    ids = np.asarray(ids, dtype=np.int64)
    target_mask = np.ones(ids.shape[0] - 1) if mask is None else np.asarray(mask)[1:]
    count = int(target_mask.sum())
    if count == 0:
        return 0.0, 0
    with no_grad():
        logits = model.forward(ids[None, :-1]).logits
        mean = cross_entropy(logits, ids[None, 1:], target_mask[None, :]).item()
    return float(mean) * count, count


def perplexity(model: Union[Checkpoint, TransformerModel], corpus: Iterable[np.ndarray]) -> float:
    """
    exp(entropie croisée moyenne par token), forçage enseignant.

    Raises:
        MetricInputError: Corpus vide (aucune position à prédire)
    """
    model = _as_model(model)
    total, count = 0.0, 0
    for sequence in corpus:
        if len(sequence) < 2:
            continue
        nll, n = sequence_nll(model, sequence)
        total += nll
        count += n
    if count == 0:
        raise MetricInputError("perplexity needs a non-empty corpus")
    return float(np.exp(total / count))


def generate(
    model: Union[Checkpoint, TransformerModel],
    prompt: Sequence[int],
    max_new: int,
    mode: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """
    Décodage glouton ou échantillonné.

    Args:
        model: Modèle
        prompt: Identifiants du contexte
        max_new: Nombre maximal de nouveaux tokens
        mode: "greedy" ou "sample"
        temperature: Température d'échantillonnage (0 = glouton)
        seed: Graine d'échantillonnage

    Returns:
        Nouveaux tokens (END exclu); arrêt à END, max_new, ou contexte plein
    """
    model = _as_model(model)
    ids = [int(t) for t in prompt]
    if len(ids) > model.config.max_context:
        raise ContextOverflowError(len(ids), model.config.max_context)
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode: {mode}")

    rng = np.random.default_rng(seed)
    greedy = mode == "greedy" or temperature <= 0.0
    new: List[int] = []

    with no_grad():
        for _ in range(max_new):
            if len(ids) >= model.config.max_context:
                break
            logits = model.forward(np.asarray(ids)[None, :]).logits.data[0, -1].astype(np.float64)
            if greedy:
                token = int(np.argmax(logits))
            else:
                scaled = logits / temperature
                probs = np.exp(scaled - scaled.max())
                probs /= probs.sum()
                token = int(rng.choice(len(probs), p=probs))
            if token == END:
                break
            ids.append(token)
            new.append(token)

    return np.asarray(new, dtype=np.int64)
