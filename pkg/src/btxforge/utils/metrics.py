"""
Collecteur de métriques Prometheus pour l'entraînement BTXForge.

Écrit au format texte Prometheus (textfile), sans serveur.

Métriques:
    - btxforge_loss: Perte du dernier pas (par étape)
    - btxforge_aux_loss: Perte d'équilibrage du dernier pas
    - btxforge_learning_rate: Learning rate du dernier pas
    - btxforge_optimizer_steps_total: Pas d'optimiseur
    - btxforge_divergences_total: Entraînements interrompus (perte non finie)
"""

from pathlib import Path
from typing import Optional, Union

import structlog

try:
    from prometheus_client import (
        CollectorRegistry,
        Counter,
        Gauge,
        Info,
        generate_latest,
        write_to_textfile,
    )
    PROMETHEUS_AVAILABLE = True
except ImportError:
    PROMETHEUS_AVAILABLE = False

logger = structlog.get_logger(__name__)


class TrainingMetrics:
    """Métriques d'entraînement étiquetées par étape."""

    def __init__(self, prefix: str = "btxforge"):
        """
        Initialise le collecteur.

        Args:
            prefix: Préfixe des métriques
        """
        self._prefix = prefix
        self._enabled = PROMETHEUS_AVAILABLE

        if not self._enabled:
            logger.warning("prometheus_not_available")
            return

        # Registre dédié
        self._registry = CollectorRegistry()

        self._info = Info(
            f"{prefix}_run",
            "BTXForge run information",
            registry=self._registry,
        )

        self._loss = Gauge(
            f"{prefix}_loss",
            "Training loss at the last optimizer step",
            ["stage"],
            registry=self._registry,
        )

        self._aux_loss = Gauge(
            f"{prefix}_aux_loss",
            "Load-balancing loss at the last optimizer step",
            ["stage"],
            registry=self._registry,
        )

        self._lr = Gauge(
            f"{prefix}_learning_rate",
            "Learning rate at the last optimizer step",
            ["stage"],
            registry=self._registry,
        )

        self._steps = Counter(
            f"{prefix}_optimizer_steps",
            "Optimizer steps taken",
            ["stage"],
            registry=self._registry,
        )

        self._divergences = Counter(
            f"{prefix}_divergences",
            "Training runs aborted on a non-finite loss",
            ["stage"],
            registry=self._registry,
        )

        logger.debug("training_metrics_initialized", prefix=prefix)

    @property
    def enabled(self) -> bool:
        return self._enabled

    def set_info(self, experiment: str, seed: int) -> None:
        if not self._enabled:
            return
        self._info.info({"experiment": experiment, "seed": str(seed)})

    def record_step(self, stage: str, lr: float, loss: float, aux_loss: float = 0.0) -> None:
        """Enregistre un pas d'optimiseur."""
        if not self._enabled:
            return
        self._loss.labels(stage=stage).set(loss)
        self._aux_loss.labels(stage=stage).set(aux_loss)
        self._lr.labels(stage=stage).set(lr)
        self._steps.labels(stage=stage).inc()

    def record_divergence(self, stage: str) -> None:
        if not self._enabled:
            return
        self._divergences.labels(stage=stage).inc()

    def render(self) -> bytes:
        """Métriques au format texte Prometheus."""
        if not self._enabled:
            return b""
        return generate_latest(self._registry)

    def write(self, path: Union[str, Path]) -> Optional[Path]:
        """
        Écrit les métriques dans un fichier texte.

        Returns:
            Chemin écrit, None si prometheus_client est absent
        """
        if not self._enabled:
            return None
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), self._registry)
        logger.debug("metrics_written", path=str(path))
        return path
