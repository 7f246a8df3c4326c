"""
Ligne de commande BTXForge.

Usage:
    btxforge validate-config --config desk-scale
    btxforge pipeline --config desk-scale --stages data,base,branch --out runs/desk
    btxforge merge --manifest merge.yaml
    btxforge route-stats --trace runs/desk/traces/sft_2x.layer0.trace

Codes de sortie: 0 succès, 1 validation, 2 exécution, 3 divergence.
"""

import functools
import sys
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import click
import structlog
import yaml
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from btxforge import __version__
from btxforge.core.checkpoint import load_checkpoint, save_checkpoint
from btxforge.core.moe import load_balance_loss, read_trace
from btxforge.core.transformer import TransformerModel, init_model
from btxforge.data.records import Conversation, PreferencePair, SentenceRecord, read_jsonl
from btxforge.data.validators import validate_conversations
from btxforge.errors import BtxForgeError, DataValidationError, MetricInputError
from btxforge.evaluation.harness import resolve_suite, run_benchmark
from btxforge.evaluation.routing import routing_stats, specialization_score
from btxforge.merge.btx import MergePlan, load_merge_manifest, merge_btx
from btxforge.pipeline import PIPELINE_STAGES, run_pipeline
from btxforge.training.trainer import Stage, train_stage
from btxforge.utils.config import ExperimentConfig, load_config, validate_config
from btxforge.utils.logger import setup_logging
from btxforge.utils.metrics import TrainingMetrics

console = Console()
logger = structlog.get_logger(__name__)


def handle_errors(command: Callable) -> Callable:
    """Convertit les BtxForgeError en code de sortie."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except BtxForgeError as e:
            logger.error("command_failed", command=command.__name__, error=str(e), exit_code=e.exit_code)
            console.print(f"[bold red]Erreur:[/bold red] {e}")
            sys.exit(e.exit_code)

    return wrapper


def _load(config: str, out: Optional[Path]) -> ExperimentConfig:
    """Charge la configuration (chemin ou profil) et applique --out."""
    try:
        cfg = load_config(config)
    except (OSError, ValueError, yaml.YAMLError) as e:
        # ValidationError pydantic hérite de ValueError
        console.print(f"[bold red]Configuration invalide:[/bold red] {e}")
        sys.exit(1)
    if out is not None:
        cfg = cfg.model_copy(update={"output_dir": out})
    setup_logging(level=cfg.logging.level, format=cfg.logging.format,
                  log_file=Path(cfg.logging.output) if cfg.logging.output else None, experiment=cfg.name)
    return cfg


def _parse_stages(value: Optional[str]) -> Optional[List[str]]:
    if not value:
        return None
    stages = [s.strip() for s in value.split(",") if s.strip()]
    unknown = [s for s in stages if s not in PIPELINE_STAGES]
    if unknown:
        raise click.BadParameter(f"unknown stages {unknown}; expected a subset of {list(PIPELINE_STAGES)}")
    return stages


config_option = click.option(
    "--config", "-c",
    default="desk-scale",
    show_default=True,
    help="Fichier YAML ou nom de profil (desk-scale, paper-*)",
)
out_option = click.option(
    "--out", "-o",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Dossier de sortie (remplace output_dir)",
)


@click.group()
@click.version_option(__version__, prog_name="btxforge")
def cli() -> None:
    """
    BTXForge - Branch-Train-MiX pour l'arabe égyptien en double écriture.
    """


# ============================================================================
# Pipeline
# ============================================================================

def _run_stages(cfg: ExperimentConfig, stages: Optional[List[str]]) -> None:
    console.print(Panel.fit(
        f"[bold blue]BTXForge v{__version__}[/bold blue]\n"
        f"[dim]{cfg.name} | seed {cfg.seed} | {cfg.output_dir}[/dim]",
        border_style="blue",
    ))
    manifest = run_pipeline(cfg, stages)

    table = Table(title="Étapes")
    table.add_column("Étape", style="cyan")
    table.add_column("Artefacts", justify="right")
    table.add_column("Empreinte", style="dim")
    for stage in PIPELINE_STAGES:
        record = manifest.stages.get(stage)
        if record is not None:
            table.add_row(stage, str(len(record.artifacts)), record.config_hash[:12])
    console.print(table)


@cli.command()
@config_option
@click.option("--stages", "-s", default=None, help="Étapes séparées par des virgules (toutes par défaut)")
@out_option
@handle_errors
def pipeline(config: str, stages: Optional[str], out: Optional[Path]) -> None:
    """Exécute le pipeline complet ou un sous-ensemble d'étapes."""
    selected = _parse_stages(stages)
    _run_stages(_load(config, out), selected)


@cli.command("gen-data")
@config_option
@out_option
@handle_errors
def gen_data(config: str, out: Optional[Path]) -> None:
    """Génère les corpus synthétiques (étape data)."""
    _run_stages(_load(config, out), ["data"])


# ============================================================================
# Entraînement et fusion
# ============================================================================

def _stage_dataset(stage: Stage, path: Path) -> list:
    if stage.uses_token_stream:
        return [r.text for r in read_jsonl(path, SentenceRecord)]
    if stage == Stage.SFT:
        return read_jsonl(path, Conversation)
    return read_jsonl(path, PreferencePair)


@cli.command()
@config_option
@click.option("--stage", "stage_name", type=click.Choice([s.value for s in Stage]), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="JSONL: phrases (base/cpt/anneal), conversations (sft) ou paires (dpo)")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Point de départ (initialisation aléatoire si absent)")
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), required=True)
@handle_errors
def train(config: str, stage_name: str, data_path: Path, checkpoint: Optional[Path], output: Path) -> None:
    """Entraîne une étape avec le preset de la configuration."""
    cfg = _load(config, None)
    stage = Stage(stage_name)
    preset = getattr(cfg.stages, stage.value)
    start = load_checkpoint(checkpoint) if checkpoint else init_model(cfg.model, cfg.seed)

    metrics = TrainingMetrics()
    metrics.set_info(cfg.name, cfg.seed)
    trained, curve = train_stage(
        start,
        _stage_dataset(stage, data_path),
        stage,
        preset.optim,
        lora=preset.lora,
        seed=cfg.seed,
        dpo=preset.dpo,
        metrics=metrics,
        metadata=f"{stage.value}:{output.stem}",
    )
    save_checkpoint(trained, output)
    curve.write_tsv(output.with_suffix(".tsv"))
    metrics.write(output.with_suffix(".prom"))
    console.print(
        f"[green]✓[/green] {stage.value}: {len(curve.records)} pas, "
        f"perte {curve.head_mean():.4f} → {curve.tail_mean():.4f}, {output}"
    )


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@handle_errors
def merge(manifest: Path) -> None:
    """Fusionne des checkpoints denses en MoE (manifeste YAML)."""
    spec = load_merge_manifest(manifest)
    sources = [load_checkpoint(p) for p in spec.sources]
    merged = merge_btx(MergePlan(sources=sources, include_base_as_expert=spec.include_base, moe=spec.moe_config()))
    save_checkpoint(merged, spec.output)
    console.print(
        f"[green]✓[/green] {merged.config.moe.n_experts} experts, top-{merged.config.moe.top_k} → {spec.output}"
    )


# ============================================================================
# Évaluation
# ============================================================================

@cli.command("eval")
@config_option
@click.option("--checkpoint", "checkpoints", multiple=True,
              type=click.Path(dir_okay=False, path_type=Path),
              help="Checkpoint(s) à évaluer (étape eval du pipeline si absent)")
@click.option("--suite", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@out_option
@handle_errors
def evaluate(config: str, checkpoints: Tuple[Path, ...], suite: Optional[Path], out: Optional[Path]) -> None:
    """Évalue des checkpoints sur la suite de benchmarks."""
    cfg = _load(config, out)
    if suite is not None:
        cfg = cfg.model_copy(update={"eval": cfg.eval.model_copy(update={"suite": suite})})
    if not checkpoints:
        _run_stages(cfg, ["eval"])
        return

    bench = resolve_suite(cfg.eval.suite, cfg.seed, cfg.eval.mc_examples, cfg.eval.generation_examples)
    for path in checkpoints:
        model = TransformerModel(load_checkpoint(path), trainable=False)
        report = run_benchmark(model, bench, seed=cfg.seed, max_new_tokens=cfg.eval.max_new_tokens,
                               temperature=cfg.eval.temperature)
        console.print(report.to_table(title=path.name))
        if out is not None:
            report.save(out / "reports" / f"{path.stem}.json")


@cli.command("route-stats")
@click.option("--trace", "trace_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@handle_errors
def route_stats(trace_path: Path) -> None:
    """Affiche P(expert | écriture) et la spécialisation d'une trace."""
    trace = read_trace(trace_path)
    stats = routing_stats(trace)

    table = Table(title=f"Routage couche {trace.layer} ({len(trace)} tokens)")
    table.add_column("Écriture", style="cyan")
    for e in range(stats.n_experts):
        table.add_column(f"expert {e}", justify="right")
    for i, script in enumerate(stats.scripts):
        table.add_row(script, *[f"{p:.3f}" for p in stats.probabilities[i]])
    console.print(table)

    try:
        console.print(f"Spécialisation (arabic/latin): [bold]{specialization_score(stats, ['arabic', 'latin']):.4f}[/bold]")
    except MetricInputError as e:
        console.print(f"[yellow]Spécialisation indisponible:[/yellow] {e}")
    console.print(f"Équilibrage de charge: {load_balance_loss(trace):.4f}")


# ============================================================================
# Validation
# ============================================================================

@cli.command("validate-data")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@handle_errors
def validate_data(data_path: Path) -> None:
    """Valide un fichier JSONL de conversations (rôles, contenu, ratio de longueur)."""
    report = validate_conversations(read_jsonl(data_path, Conversation))
    if not report.rejections:
        console.print(f"[green]✓[/green] {len(report.accepted)} conversations valides")
        return

    table = Table(title=f"{report.n_rejected} rejet(s)")
    table.add_column("Enregistrement", style="cyan")
    table.add_column("Règle", style="red")
    table.add_column("Détail")
    for rejection in report.rejections:
        table.add_row(rejection.record_id, rejection.rule, rejection.detail)
    console.print(table)
    raise DataValidationError(f"{report.n_rejected} invalid record(s) in {data_path}")


@cli.command("validate-config")
@config_option
def validate_config_command(config: str) -> None:
    """Valide un fichier de configuration (messages ancrés sur les lignes)."""
    report = validate_config(config)
    if report.valid:
        console.print(f"[green]✓[/green] {report.path}: configuration valide")
        return
    for message in report.messages:
        console.print(f"[red]✗[/red] {message}")
    sys.exit(1)


def main() -> None:
    """Point d'entrée de la console."""
    cli()


if __name__ == "__main__":
    main()
