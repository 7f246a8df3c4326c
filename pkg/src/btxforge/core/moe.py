"""
Couche Mixture-of-Experts: routeur entraînable, routage top-k, perte d'équilibrage.

Routage:
    - top-k par token, égalités départagées par l'indice d'expert le plus bas
    - portes = softmax sur les logits sélectionnés seulement (renormalisé)
    - pas de capacité: aucun token n'est abandonné
    - seuls les experts sélectionnés sont évalués pour un token

Perte d'équilibrage: L = N · Σ_i f_i · P_i
    f_i = part des tokens dont l'expert top-1 est i (égalités partagées)
    P_i = probabilité moyenne du routeur pour l'expert i

Export de trace (une ligne par token, séparateur tabulation):
    séquence, position, écriture, paires "e:porte", probabilités du routeur
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from btxforge.core.layers import FfnWeights, gated_ffn
from btxforge.core.tensor import (
    Tensor,
    add,
    embedding,
    matmul,
    mean_rows,
    mul,
    softmax,
    to_scalar,
)
from btxforge.errors import EmptyTraceError, RoutingError, ShapeError
from btxforge.utils.config import MoeConfig

logger = structlog.get_logger(__name__)

GATE_MASK = -1e9
TRACE_HEADER = "# btx-trace v1"


# ============================================================================
# Trace de routage
# ============================================================================

@dataclass(frozen=True)
class TokenRoute:
    """Décision de routage d'un token."""
    sequence: int
    position: int
    script: str
    experts: Tuple[int, ...]
    gates: Tuple[float, ...]
    probs: Tuple[float, ...]


@dataclass
class RoutingTrace:
    """Trace de routage d'une couche MoE, tokens dans l'ordre."""
    n_experts: int
    top_k: int
    layer: int = 0
    tokens: List[TokenRoute] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def extend(self, other: "RoutingTrace") -> None:
        if (other.n_experts, other.top_k) != (self.n_experts, self.top_k):
            raise RoutingError("cannot merge traces with different expert settings")
        self.tokens.extend(other.tokens)

    def probabilities(self) -> np.ndarray:
        """Probabilités du routeur [T × N] (float64)."""
        if not self.tokens:
            return np.zeros((0, self.n_experts), dtype=np.float64)
        return np.asarray([t.probs for t in self.tokens], dtype=np.float64)


def route_topk(router_logits: Union[Tensor, np.ndarray], k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sélection top-k et portes renormalisées.

    Args:
        router_logits: [T × N]
        k: Nombre d'experts actifs par token

    Returns:
        (ids [T × k] triés par logit décroissant, portes [T × k])

    Raises:
        RoutingError: k hors de [1, N]
    """
    logits = router_logits.data if isinstance(router_logits, Tensor) else np.asarray(router_logits)
    if logits.ndim != 2:
        raise ShapeError(f"router logits must be [T x N], got {logits.shape}")
    n_experts = logits.shape[1]
    if not 1 <= k <= n_experts:
        raise RoutingError(f"top_k ({k}) must be in [1, n_experts ({n_experts})]")

    ids = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(logits, ids, axis=1).astype(np.float64)
    shifted = np.exp(picked - picked.max(axis=1, keepdims=True))
    gates = shifted / shifted.sum(axis=1, keepdims=True)
    return ids, gates.astype(logits.dtype)


def top1_fractions(probs: np.ndarray) -> np.ndarray:
    """
    Affectation top-1 par token [T × N], égalités exactes partagées.

    Un routeur nul donne exactement 1/N à chaque expert.
    """
    probs = np.asarray(probs)
    winners = probs == probs.max(axis=1, keepdims=True)
    return winners / winners.sum(axis=1, keepdims=True)


def load_balance_loss(trace: RoutingTrace, n_experts: Optional[int] = None) -> float:
    """
    Perte d'équilibrage évaluée sur une trace (float64).

    Raises:
        EmptyTraceError: Trace vide
    """
    if not trace.tokens:
        raise EmptyTraceError("load balance loss needs a non-empty trace")
    n = n_experts or trace.n_experts
    probs = trace.probabilities()
    f = top1_fractions(probs).mean(axis=0)
    p = probs.mean(axis=0)
    return float(n * np.dot(f, p))


# ============================================================================
# Passe avant
# ============================================================================

@dataclass
class MoeOutput:
    """Sortie d'une couche MoE."""
    y: Tensor
    trace: RoutingTrace
    aux_loss: Tensor


def _one_hot_column(n: int, index: int, dtype: np.dtype) -> Tensor:
    column = np.zeros((n, 1), dtype=dtype)
    column[index, 0] = 1.0
    return Tensor(column)


def moe_forward(
    x: Tensor,
    experts: Sequence[FfnWeights],
    router: Tensor,
    cfg: MoeConfig,
    scripts: Optional[Sequence[str]] = None,
    sequence_ids: Optional[Sequence[int]] = None,
    positions: Optional[Sequence[int]] = None,
    layer: int = 0,
) -> MoeOutput:
    """
    Couche MoE sur des tokens aplatis.

    Args:
        x: [T × d]
        experts: N FFN à porte
        router: [d × N]
        cfg: Configuration MoE
        scripts: Étiquette d'écriture par token (trace)
        sequence_ids: Séquence d'origine par token (trace)
        positions: Position dans la séquence par token (trace)
        layer: Indice de couche (trace)

    Returns:
        y [T × d], trace, perte d'équilibrage (scalaire non pondéré)
    """
    n_tokens, d_model = x.shape
    n_experts = len(experts)
    if n_experts != cfg.n_experts:
        raise ShapeError(f"got {n_experts} experts, config says {cfg.n_experts}")
    if router.shape != (d_model, n_experts):
        raise ShapeError(f"router shape {router.shape} != ({d_model}, {n_experts})")

    logits = matmul(x, router)
    probs = softmax(logits, axis=-1)
    ids, _ = route_topk(logits, cfg.top_k)

    # Portes renormalisées: softmax avec les experts non sélectionnés à -1e9
    bias = np.full((n_tokens, n_experts), GATE_MASK, dtype=x.dtype)
    np.put_along_axis(bias, ids, 0.0, axis=1)
    gates = softmax(add(logits, Tensor(bias)), axis=-1)

    y: Optional[Tensor] = None
    for e, weights in enumerate(experts):
        selected = np.nonzero((ids == e).any(axis=1))[0]
        if selected.size == 0:
            continue
        x_e = embedding(x, selected)
        out_e = gated_ffn(x_e, weights)
        gate_e = embedding(matmul(gates, _one_hot_column(n_experts, e, x.dtype)), selected)
        scatter = np.zeros((n_tokens, selected.size), dtype=x.dtype)
        scatter[selected, np.arange(selected.size)] = 1.0
        contribution = matmul(Tensor(scatter), mul(out_e, gate_e))
        y = contribution if y is None else add(y, contribution)

    if y is None:
        raise RoutingError("no expert selected for any token")

    fractions = top1_fractions(probs.data).mean(axis=0).astype(x.dtype)
    aux = mul(to_scalar(matmul(mean_rows(probs), Tensor(fractions.reshape(-1, 1)))), float(n_experts))

    trace = _build_trace(ids, gates.data, probs.data, cfg, scripts, sequence_ids, positions, layer)
    return MoeOutput(y=y, trace=trace, aux_loss=aux)


def _build_trace(
    ids: np.ndarray,
    gates: np.ndarray,
    probs: np.ndarray,
    cfg: MoeConfig,
    scripts: Optional[Sequence[str]],
    sequence_ids: Optional[Sequence[int]],
    positions: Optional[Sequence[int]],
    layer: int,
) -> RoutingTrace:
    n_tokens = ids.shape[0]
    scripts = scripts if scripts is not None else ["other"] * n_tokens
    sequence_ids = sequence_ids if sequence_ids is not None else [0] * n_tokens
    positions = positions if positions is not None else list(range(n_tokens))

    selected_gates = np.take_along_axis(gates, ids, axis=1).astype(np.float64)
    tokens = [
        TokenRoute(
            sequence=int(sequence_ids[t]),
            position=int(positions[t]),
            script=str(scripts[t]),
            experts=tuple(int(e) for e in ids[t]),
            gates=tuple(float(g) for g in selected_gates[t]),
            probs=tuple(float(p) for p in probs[t].astype(np.float64)),
        )
        for t in range(n_tokens)
    ]
    return RoutingTrace(n_experts=cfg.n_experts, top_k=cfg.top_k, layer=layer, tokens=tokens)


# ============================================================================
# Export texte
# ============================================================================

def write_trace(trace: RoutingTrace, path: Union[str, Path]) -> None:
    """Écrit une trace au format ligne (flottants en %.9g)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{TRACE_HEADER} n_experts={trace.n_experts} top_k={trace.top_k} layer={trace.layer}"]
    for token in trace.tokens:
        pairs = " ".join(f"{e}:{g:.9g}" for e, g in zip(token.experts, token.gates))
        probs = ",".join(f"{p:.9g}" for p in token.probs)
        lines.append(f"{token.sequence}\t{token.position}\t{token.script}\t{pairs}\t{probs}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug("trace_written", path=str(path), tokens=len(trace))


def read_trace(path: Union[str, Path]) -> RoutingTrace:
    """
    Relit une trace écrite par write_trace.

    Raises:
        RoutingError: En-tête ou ligne mal formée
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(TRACE_HEADER):
        raise RoutingError(f"{path}: missing trace header")

    settings = dict(item.split("=") for item in lines[0][len(TRACE_HEADER):].split())
    trace = RoutingTrace(
        n_experts=int(settings["n_experts"]),
        top_k=int(settings["top_k"]),
        layer=int(settings.get("layer", 0)),
    )
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            sequence, position, script, pairs, probs = line.split("\t")
            experts, gates = zip(*(pair.split(":") for pair in pairs.split()))
            trace.tokens.append(TokenRoute(
                sequence=int(sequence),
                position=int(position),
                script=script,
                experts=tuple(int(e) for e in experts),
                gates=tuple(float(g) for g in gates),
                probs=tuple(float(p) for p in probs.split(",")),
            ))
        except ValueError as e:
            raise RoutingError(f"{path}:{line_no}: malformed trace line") from e
    return trace
