"""
Analyse du routage: P(expert | écriture) et score de spécialisation.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import structlog

from btxforge.core.moe import RoutingTrace, top1_fractions
from btxforge.data.script import ScriptLabel
from btxforge.errors import EmptyTraceError, MetricInputError

logger = structlog.get_logger(__name__)

_SCRIPT_ORDER = [label.value for label in ScriptLabel]


@dataclass
class RoutingStats:
    """
    Table P(expert e | écriture s) sur les affectations top-1.

    Attributes:
        scripts: Écritures (lignes)
        counts: Affectations top-1 [S × N] (égalités partagées)
        probabilities: counts normalisés par ligne
    """
    n_experts: int
    scripts: List[str]
    counts: np.ndarray
    probabilities: np.ndarray

    def row(self, script: str) -> np.ndarray:
        return self.probabilities[self.scripts.index(script)]

    def select(self, scripts: Sequence[str]) -> "RoutingStats":
        keep = [i for i, s in enumerate(self.scripts) if s in scripts]
        return RoutingStats(
            n_experts=self.n_experts,
            scripts=[self.scripts[i] for i in keep],
            counts=self.counts[keep],
            probabilities=self.probabilities[keep],
        )

    def to_dict(self) -> Dict[str, Dict[str, List[float]]]:
        return {
            script: {
                "counts": [float(c) for c in self.counts[i]],
                "probabilities": [float(p) for p in self.probabilities[i]],
            }
            for i, script in enumerate(self.scripts)
        }


def routing_stats(trace: RoutingTrace) -> RoutingStats:
    """
    Tabule les affectations top-1 par écriture.

    Raises:
        EmptyTraceError: Trace vide
    """
    if not trace.tokens:
        raise EmptyTraceError("routing statistics need a non-empty trace")

    fractions = top1_fractions(trace.probabilities())
    labels = [t.script for t in trace.tokens]
    present = set(labels)
    scripts = [s for s in _SCRIPT_ORDER if s in present] + sorted(present - set(_SCRIPT_ORDER))

    counts = np.zeros((len(scripts), trace.n_experts), dtype=np.float64)
    index = {s: i for i, s in enumerate(scripts)}
    for label, row in zip(labels, fractions):
        counts[index[label]] += row

    probabilities = counts / counts.sum(axis=1, keepdims=True)
    logger.debug("routing_stats_computed", tokens=len(trace), scripts=scripts)
    return RoutingStats(n_experts=trace.n_experts, scripts=scripts, counts=counts, probabilities=probabilities)


def specialization_score(stats: RoutingStats, scripts: Optional[Sequence[str]] = None) -> float:
    """
    Moyenne sur les écritures de max_e P(e | s), dans [1/N, 1].

    Args:
        stats: Table de routage
        scripts: Écritures retenues (toutes par défaut)

    Raises:
        MetricInputError: Moins de deux écritures
    """
    selected = stats.select(scripts) if scripts is not None else stats
    if len(selected.scripts) < 2:
        raise MetricInputError(
            f"specialization needs >= 2 scripts, got {selected.scripts}"
        )
    return float(selected.probabilities.max(axis=1).mean())
