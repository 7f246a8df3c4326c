"""
Rapport de métriques: sérialisation JSON (clés triées) et tableau rich.
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import structlog
from pydantic import BaseModel, Field, field_validator
from rich.console import Console
from rich.table import Table

logger = structlog.get_logger(__name__)

BOUNDED_METRICS = {"accuracy": 1.0, "accuracy_norm": 1.0, "bleu": 1.0, "chrf": 100.0}


class MetricReport(BaseModel):
    """
    Résultats d'un benchmark.

    Attributes:
        tasks: Tâche → {métrique → valeur}
        errors: Tâche → message d'erreur (tâches échouées)
        metadata: Checkpoint, graine...
    """

    tasks: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    errors: Dict[str, str] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("tasks")
    @classmethod
    def _values_in_range(cls, tasks: Dict[str, Dict[str, float]]) -> Dict[str, Dict[str, float]]:
        for task, metrics in tasks.items():
            for name, value in metrics.items():
                if not math.isfinite(value):
                    raise ValueError(f"{task}.{name} is not finite")
                upper = BOUNDED_METRICS.get(name)
                if upper is not None and not 0.0 <= value <= upper:
                    raise ValueError(f"{task}.{name} = {value} outside [0, {upper}]")
        return tasks

    @property
    def aggregate(self) -> Dict[str, float]:
        """Moyenne de chaque métrique sur les tâches qui la portent."""
        values: Dict[str, List[float]] = {}
        for metrics in self.tasks.values():
            for name, value in metrics.items():
                values.setdefault(name, []).append(value)
        return {name: sum(v) / len(v) for name, v in sorted(values.items())}

    def to_json(self) -> str:
        data = self.model_dump(mode="json")
        data["aggregate"] = self.aggregate
        return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        logger.debug("report_written", path=str(path), tasks=len(self.tasks))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        data.pop("aggregate", None)
        return cls.model_validate(data)

    def to_table(self, title: Optional[str] = None) -> Table:
        """Tableau: une ligne par tâche, une colonne par métrique."""
        metrics = sorted({name for values in self.tasks.values() for name in values})
        table = Table(title=title or self.metadata.get("checkpoint", "Benchmark"))
        table.add_column("Tâche", style="cyan")
        for name in metrics:
            table.add_column(name, justify="right", style="green")

        for task, values in self.tasks.items():
            table.add_row(task, *[_format(values.get(name)) for name in metrics])
        for task in self.errors:
            cells = ["[red]erreur[/red]"] + [""] * max(len(metrics) - 1, 0)
            table.add_row(f"[red]{task}[/red]", *cells[:len(metrics)])
        if self.tasks:
            aggregate = self.aggregate
            table.add_row("[bold]moyenne[/bold]", *[_format(aggregate.get(name)) for name in metrics])
        return table

    def render(self, console: Optional[Console] = None) -> None:
        (console or Console()).print(self.to_table())


def _format(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"
