"""
Logging structuré BTXForge.

Les évènements partent sur stderr (JSON ou console); stdout reste aux
tableaux et rapports. Le contexte d'étape (stage, variante...) est porté par
les contextvars de structlog et s'ajoute à chaque évènement émis dans
`bind_stage`.
"""

import contextlib
import logging
import sys
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
import structlog
from structlog.types import EventDict, Processor, WrappedLogger

SERVICE_NAME = "btxforge"


def add_service_info(logger: WrappedLogger, method_name: str, event_dict: EventDict) -> EventDict:
    event_dict.setdefault("service", SERVICE_NAME)
    return event_dict


def summarize_arrays(logger: WrappedLogger, method_name: str, event_dict: EventDict) -> EventDict:
    """Remplace les tableaux numpy par leur forme; les scalaires numpy deviennent des nombres Python."""
    for key, value in list(event_dict.items()):
        if isinstance(value, np.ndarray):
            if value.size == 1:
                event_dict[key] = value.item()
            else:
                event_dict[key] = f"array{list(value.shape)}:{value.dtype}"
        elif isinstance(value, np.generic):
            event_dict[key] = value.item()
    return event_dict


def setup_logging(
    level: str = "INFO",
    format: str = "json",
    log_file: Optional[Path] = None,
    experiment: Optional[str] = None,
) -> None:
    """
    Configure structlog et le logging standard.

    Args:
        level: DEBUG, INFO, WARNING, ERROR
        format: json ou console
        log_file: Copie des évènements dans un fichier (optionnel)
        experiment: Nom d'expérience lié à tous les évènements
    """
    numeric_level = getattr(logging, level.upper())
    processors: list[Processor] = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.processors.TimeStamper(fmt="iso", utc=True),
        add_service_info,
        summarize_arrays,
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
    ]
    if format == "json":
        processors.append(structlog.processors.JSONRenderer(ensure_ascii=False))
    else:
        processors.append(structlog.dev.ConsoleRenderer(colors=sys.stderr.isatty()))

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=True,
    )

    logging.basicConfig(format="%(message)s", stream=sys.stderr, level=numeric_level)
    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(log_file, encoding="utf-8")
        handler.setLevel(numeric_level)
        logging.getLogger().addHandler(handler)

    structlog.contextvars.clear_contextvars()
    if experiment:
        structlog.contextvars.bind_contextvars(experiment=experiment)

    structlog.get_logger(__name__).info(
        "logging_configured",
        level=level,
        format=format,
        log_file=str(log_file) if log_file else None,
    )


@contextlib.contextmanager
def bind_stage(stage: str, **context: Any) -> Iterator[None]:
    """Lie `stage` (et le contexte donné) aux évènements émis dans le bloc."""
    with structlog.contextvars.bound_contextvars(stage=stage, **context):
        yield
