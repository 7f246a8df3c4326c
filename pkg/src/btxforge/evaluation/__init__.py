"""
Évaluation: choix multiples, BLEU/chrF, analyse du routage.
"""

from btxforge.evaluation.harness import (
    BenchmarkSuite,
    GenerationTask,
    McTask,
    ScoreMode,
    TaskSpec,
    TaskType,
    build_synthetic_suite,
    load_suite,
    mc_score,
    run_benchmark,
    save_suite,
)
from btxforge.evaluation.metrics import bleu, chrf
from btxforge.evaluation.report import MetricReport
from btxforge.evaluation.routing import RoutingStats, routing_stats, specialization_score

__all__ = [
    "BenchmarkSuite",
    "GenerationTask",
    "McTask",
    "MetricReport",
    "RoutingStats",
    "ScoreMode",
    "TaskSpec",
    "TaskType",
    "bleu",
    "build_synthetic_suite",
    "chrf",
    "load_suite",
    "mc_score",
    "routing_stats",
    "run_benchmark",
    "save_suite",
    "specialization_score",
]
