"""
Orchestration de l'expérience complète.

Étapes (ordre canonique):
    data    corpus des branches, annealing, base, instructions, chats
    base    pré-entraînement du modèle de base dense
    branch  CPT puis annealing par branche d'écriture
    merge   fusion BTX (variantes 2x, 3x...)
    sft     fine-tuning supervisé des modèles fusionnés
    dpo     alignement par préférences
    eval    benchmark + perplexité par écriture
    route   traces de routage et spécialisation

Artefacts (sous output_dir):
    data/*.jsonl, checkpoints/*.btx, curves/*.tsv, metrics/*.prom,
    reports/*.json, traces/*.trace, routing/*.json, manifest.json

Le manifeste garde pour chaque étape l'empreinte de sa configuration
(sections utiles + empreintes des étapes amont) et pour chaque artefact
l'empreinte de son contenu. Une étape dont l'empreinte et les artefacts
correspondent est sautée.
"""

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, Field

from btxforge.core.checkpoint import load_checkpoint, save_checkpoint
from btxforge.core.moe import RoutingTrace, load_balance_loss, write_trace
from btxforge.core.tensor import no_grad
from btxforge.core.tokenizer import ByteTokenizer, serialize_conversation
from btxforge.core.transformer import Checkpoint, TransformerModel, init_model, perplexity
from btxforge.data.corpus import (
    CorpusDomain,
    CorpusSpec,
    generate_code_switched_chats,
    generate_corpus,
)
from btxforge.data.records import Conversation, PreferencePair, SentenceRecord, read_jsonl, split_holdout, write_jsonl
from btxforge.data.script import ScriptLabel
from btxforge.data.templates import generate_instructions
from btxforge.data.validators import validate_conversations
from btxforge.errors import EmptyCandidateSetError, MissingStageInputError
from btxforge.evaluation.harness import resolve_suite, run_benchmark
from btxforge.evaluation.report import MetricReport
from btxforge.evaluation.routing import routing_stats, specialization_score
from btxforge.merge.btx import MergePlan, dense_equivalence, merge_btx
from btxforge.training.preference import PairMode, build_preference_pairs
from btxforge.training.trainer import Stage, dpo_hyperparameter_search, train_stage
from btxforge.utils.config import ExperimentConfig, StagePreset
from btxforge.utils.logger import bind_stage
from btxforge.utils.metrics import TrainingMetrics

logger = structlog.get_logger(__name__)

PIPELINE_STAGES = ("data", "base", "branch", "merge", "sft", "dpo", "eval", "route")

STAGE_UPSTREAM: Dict[str, Tuple[str, ...]] = {
    "data": (),
    "base": ("data",),
    "branch": ("data", "base"),
    "merge": ("base", "branch"),
    "sft": ("data", "merge"),
    "dpo": ("data", "sft"),
    "eval": ("data", "base", "branch", "merge", "sft", "dpo"),
    "route": ("merge", "sft", "dpo"),
}

DENSE_EQUIVALENCE_TOLERANCE = 1e-6
MANIFEST_NAME = "manifest.json"


# ============================================================================
# Manifeste
# ============================================================================

def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactEntry(BaseModel):
    """Artefact produit par une étape."""
    path: str
    stage: str
    config_hash: str
    content_hash: str


class StageRecord(BaseModel):
    """Dernière exécution d'une étape."""
    config_hash: str
    artifacts: List[str] = Field(default_factory=list)
    checks: Dict[str, Any] = Field(default_factory=dict)


class PipelineManifest(BaseModel):
    """manifest.json: étapes et artefacts."""
    experiment: str = ""
    seed: int = 0
    stages: Dict[str, StageRecord] = Field(default_factory=dict)
    artifacts: Dict[str, ArtifactEntry] = Field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "PipelineManifest":
        if not path.exists():
            return cls()
        return cls.model_validate_json(path.read_text(encoding="utf-8"))

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.model_dump(mode="json")
        path.write_text(json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclasses.dataclass
class StageOutput:
    """Artefacts et vérifications d'une étape."""
    artifacts: List[Path] = dataclasses.field(default_factory=list)
    checks: Dict[str, Any] = dataclasses.field(default_factory=dict)


# ============================================================================
# Exécution
# ============================================================================

class PipelineRunner:
    """
    Exécute les étapes demandées, dans l'ordre canonique.

    Chaque étape lit ses entrées sur disque (produites plus tôt dans ce run ou
    dans un run précédent) et enregistre ses artefacts dans le manifeste.
    """

    def __init__(self, config: ExperimentConfig, output_dir: Optional[Path] = None):
        """
        Args:
            config: Configuration validée
            output_dir: Dossier de sortie (config.output_dir par défaut)
        """
        self.config = config
        self.out = Path(output_dir or config.output_dir)
        self.manifest_path = self.out / MANIFEST_NAME
        self.manifest = PipelineManifest.load(self.manifest_path)
        self.manifest.experiment = config.name
        self.manifest.seed = config.seed
        self.tokenizer = ByteTokenizer()

        self._stages: Dict[str, Callable[[], StageOutput]] = {
            "data": self._run_data,
            "base": self._run_base,
            "branch": self._run_branch,
            "merge": self._run_merge,
            "sft": self._run_sft,
            "dpo": self._run_dpo,
            "eval": self._run_eval,
            "route": self._run_route,
        }
        logger.info("pipeline_runner_initialized", experiment=config.name, output_dir=str(self.out))

    # --- Chemins ---

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def checkpoint_path(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.btx")

    def _load(self, name: str, what: Optional[str] = None) -> Checkpoint:
        path = self.checkpoint_path(name)
        if not path.exists():
            raise MissingStageInputError(what or f"checkpoint {name}")
        return load_checkpoint(path)

    def _read(self, name: str, model: type) -> list:
        path = self.path("data", name)
        if not path.exists():
            raise MissingStageInputError(f"data {name}")
        return read_jsonl(path, model)

    def _texts(self, name: str) -> List[str]:
        return [r.text for r in self._read(name, SentenceRecord)]

    # --- Empreintes ---

    def _sections(self, stage: str) -> Dict[str, Any]:
        c = self.config
        sections: Dict[str, Any] = {"seed": c.seed}
        if stage == "data":
            sections.update(data=c.data, max_context=c.model.max_context)
        elif stage == "base":
            sections.update(model=c.model, preset=c.stages.base)
        elif stage == "branch":
            sections.update(cpt=c.stages.cpt, anneal=c.stages.anneal, branches=c.data.branches)
        elif stage == "merge":
            sections.update(merge=c.merge, branches=c.data.branches)
        elif stage == "sft":
            sections.update(preset=c.stages.sft, variants=c.merge.variants)
        elif stage == "dpo":
            sections.update(preset=c.stages.dpo, variants=c.merge.variants)
        elif stage == "eval":
            sections.update(eval=c.eval)
        elif stage == "route":
            sections.update(routing_sentences=c.eval.routing_sentences)
        return {k: v.model_dump(mode="json") if isinstance(v, BaseModel) else
                [x.model_dump(mode="json") for x in v] if isinstance(v, list) else v
                for k, v in sections.items()}

    def config_hash(self, stage: str) -> str:
        """Empreinte: sections utiles + empreintes amont."""
        upstream = {
            dep: self.manifest.stages[dep].config_hash if dep in self.manifest.stages else None
            for dep in STAGE_UPSTREAM[stage]
        }
        payload = json.dumps(
            {"stage": stage, "sections": self._sections(stage), "upstream": upstream},
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def is_current(self, stage: str, config_hash: str) -> bool:
        record = self.manifest.stages.get(stage)
        if record is None or record.config_hash != config_hash or not record.artifacts:
            return False
        for key in record.artifacts:
            entry = self.manifest.artifacts.get(key)
            path = self.out / key
            if entry is None or not path.exists() or file_hash(path) != entry.content_hash:
                return False
        return True

    def _record(self, stage: str, config_hash: str, output: StageOutput) -> None:
        keys = []
        for path in output.artifacts:
            key = path.relative_to(self.out).as_posix()
            self.manifest.artifacts[key] = ArtifactEntry(
                path=key, stage=stage, config_hash=config_hash, content_hash=file_hash(path),
            )
            keys.append(key)
        self.manifest.stages[stage] = StageRecord(config_hash=config_hash, artifacts=keys, checks=output.checks)
        self.manifest.save(self.manifest_path)

    def run(self, stages: Optional[Sequence[str]] = None) -> PipelineManifest:
        """
        Exécute des étapes.

        Args:
            stages: Sous-ensemble de PIPELINE_STAGES (toutes par défaut)

        Returns:
            Manifeste à jour

        Raises:
            ValueError: Étape inconnue
            MissingStageInputError: Entrée absente
            DivergenceError: Entraînement divergent
        """
        requested = list(stages) if stages else list(PIPELINE_STAGES)
        unknown = sorted(set(requested) - set(PIPELINE_STAGES))
        if unknown:
            raise ValueError(f"unknown pipeline stages: {unknown}")

        self.out.mkdir(parents=True, exist_ok=True)
        for stage in PIPELINE_STAGES:
            if stage not in requested:
                continue
            config_hash = self.config_hash(stage)
            if self.is_current(stage, config_hash):
                logger.info("stage_skipped", stage=stage, reason="artifacts up to date")
                continue
            with bind_stage(stage):
                logger.info("pipeline_stage_started")
                output = self._stages[stage]()
            self._record(stage, config_hash, output)
            logger.info("pipeline_stage_completed", stage=stage, artifacts=len(output.artifacts))
        return self.manifest

    # --- Entraînement commun ---

    def _train(
        self,
        checkpoint: Checkpoint,
        dataset: Any,
        stage: Stage,
        preset: StagePreset,
        name: str,
        metadata: str,
        seed_offset: int,
    ) -> Tuple[Checkpoint, List[Path]]:
        metrics = TrainingMetrics()
        metrics.set_info(self.config.name, self.config.seed)
        trained, curve = train_stage(
            checkpoint,
            dataset,
            stage,
            preset.optim,
            lora=preset.lora,
            seed=self.config.seed + seed_offset,
            dpo=preset.dpo,
            metrics=metrics,
            metadata=metadata,
        )
        artifacts = [
            save_checkpoint(trained, self.checkpoint_path(name)),
            curve.write_tsv(self.path("curves", f"{name}.tsv")),
        ]
        prom = metrics.write(self.path("metrics", f"{name}.prom"))
        if prom is not None:
            artifacts.append(prom)
        return trained, artifacts

    # --- Étapes ---

    def _corpus(self, n: int, latin_ratio: float, noise: float, seed: int, domain: CorpusDomain) -> List[SentenceRecord]:
        spec = CorpusSpec(n_sentences=n, latin_ratio=latin_ratio, noise_level=noise, seed=seed, domain=domain)
        return [s.to_record() for s in generate_corpus(spec)]

    def _run_data(self) -> StageOutput:
        data, seed = self.config.data, self.config.data.seed
        out = StageOutput()

        for index, branch in enumerate(data.branches):
            domain = CorpusDomain.BRANCH_LATIN if branch.latin_ratio > 0.5 else CorpusDomain.BRANCH_ARABIC
            cpt = self._corpus(data.branch_sentences, branch.latin_ratio, data.noise_level, seed + index, domain)
            anneal = self._corpus(
                data.anneal_sentences, branch.latin_ratio, data.anneal_noise_level, seed + 1000 + index, domain
            )
            write_jsonl(cpt, self.path("data", f"cpt_{branch.name}.jsonl"))
            write_jsonl(anneal, self.path("data", f"anneal_{branch.name}.jsonl"))
            out.artifacts += [self.path("data", f"cpt_{branch.name}.jsonl"),
                              self.path("data", f"anneal_{branch.name}.jsonl")]

        base = self._corpus(data.base_sentences, 0.0, data.noise_level, seed, CorpusDomain.BASE)
        heldout = self._corpus(data.eval_sentences, data.latin_ratio, 0.0, seed + 2000, CorpusDomain.BRANCH_ARABIC)
        write_jsonl(base, self.path("data", "base.jsonl"))
        write_jsonl(heldout, self.path("data", "heldout.jsonl"))
        out.artifacts += [self.path("data", "base.jsonl"), self.path("data", "heldout.jsonl")]

        instructions = generate_instructions(data.sft_examples, seed, data.english_sft_fraction, data.noise_level)
        report = validate_conversations(instructions)
        fitting = [c for c in report.accepted if len(serialize_conversation(c)) <= self.config.model.max_context + 1]
        train, held = split_holdout(fitting, data.heldout_fraction, seed)
        write_jsonl(train, self.path("data", "sft_train.jsonl"))
        write_jsonl(held, self.path("data", "sft_heldout.jsonl"))

        chats = generate_code_switched_chats(data.chat_examples, seed)
        write_jsonl(chats, self.path("data", "chats.jsonl"))
        out.artifacts += [self.path("data", n) for n in ("sft_train.jsonl", "sft_heldout.jsonl", "chats.jsonl")]

        out.checks = {
            "sft_rejected": report.n_rejected,
            "sft_rejected_by_rule": report.by_rule(),
            "sft_over_context": len(report.accepted) - len(fitting),
            "sft_train": len(train),
        }
        logger.info("data_generated", **{k: v for k, v in out.checks.items() if k != "sft_rejected_by_rule"})
        return out

    def _run_base(self) -> StageOutput:
        texts = self._texts("base.jsonl")
        start = init_model(self.config.model, self.config.seed, metadata="init")
        _, artifacts = self._train(start, texts, Stage.BASE, self.config.stages.base, "base", "base", 0)
        return StageOutput(artifacts=artifacts)

    def _run_branch(self) -> StageOutput:
        base = self._load("base")
        out = StageOutput()
        for index, branch in enumerate(self.config.data.branches):
            cpt, artifacts = self._train(
                base, self._texts(f"cpt_{branch.name}.jsonl"), Stage.CPT, self.config.stages.cpt,
                f"cpt_{branch.name}", f"cpt:{branch.name}", 10 + index,
            )
            out.artifacts += artifacts
            _, artifacts = self._train(
                cpt, self._texts(f"anneal_{branch.name}.jsonl"), Stage.ANNEAL, self.config.stages.anneal,
                f"branch_{branch.name}", f"branch:{branch.name}", 20 + index,
            )
            out.artifacts += artifacts
        return out

    def _run_merge(self) -> StageOutput:
        """
        Fusionne les branches pour chaque variante.

        Contrôle d'équivalence dense: sur le modèle fusionné si toutes ses
        sources sont identiques, sinon sur une fusion jumelle (autant de
        copies de la base que d'experts, même configuration MoE).
        """
        out = StageOutput()
        branches = [self._load(f"branch_{b.name}") for b in self.config.data.branches]
        base = self._load("base")
        for variant in self.config.merge.variants:
            sources = list(branches)
            if variant.include_base:
                sources.append(base)
            merged = merge_btx(MergePlan(sources=sources, include_base_as_expert=variant.include_base,
                                         moe=variant.moe_config()))
            out.artifacts.append(save_checkpoint(merged, self.checkpoint_path(f"merged_{variant.name}")))

            if len({s.content_hash() for s in sources}) == 1:
                checked, reference, target = "merged", sources[0], merged
            else:
                checked, reference = "twin", base
                target = merge_btx(MergePlan(sources=[base] * len(sources),
                                             include_base_as_expert=variant.include_base,
                                             moe=variant.moe_config()))
            diff = dense_equivalence(target, reference, self.config.merge.dense_check_inputs, self.config.seed)
            out.checks[f"dense_equivalence_{variant.name}"] = {
                "model": checked,
                "max_abs_diff": diff,
                "passed": diff <= DENSE_EQUIVALENCE_TOLERANCE,
            }
            logger.info("dense_equivalence_checked", variant=variant.name, model=checked, max_abs_diff=diff)
        return out

    def _run_sft(self) -> StageOutput:
        conversations = self._read("sft_train.jsonl", Conversation)
        out = StageOutput()
        for index, variant in enumerate(self.config.merge.variants):
            merged = self._load(f"merged_{variant.name}")
            _, artifacts = self._train(
                merged, conversations, Stage.SFT, self.config.stages.sft,
                f"sft_{variant.name}", f"sft:{variant.name}", 30 + index,
            )
            out.artifacts += artifacts
        return out

    def _preference_pairs(self, policy: Checkpoint, preset: StagePreset, seed: int) -> List[PreferencePair]:
        pairs: List[PreferencePair] = []
        sources = [
            (PairMode.ON_POLICY, self._read("sft_train.jsonl", Conversation)),
            (PairMode.OFF_POLICY, self._read("chats.jsonl", Conversation)),
        ]
        for mode, records in sources:
            try:
                pairs += build_preference_pairs(records, policy, mode, seed, dpo=preset.dpo)
            except EmptyCandidateSetError as e:
                logger.warning("preference_pairs_empty", mode=mode.value, error=str(e))
        if not pairs:
            raise EmptyCandidateSetError("no preference pair from either strategy")
        return pairs

    def _run_dpo(self) -> StageOutput:
        preset = self.config.stages.dpo
        out = StageOutput()
        for index, variant in enumerate(self.config.merge.variants):
            sft = self._load(f"sft_{variant.name}")
            seed = self.config.seed + 40 + index
            pairs = self._preference_pairs(sft, preset, seed)
            pairs_path = self.path("data", f"pairs_{variant.name}.jsonl")
            write_jsonl(pairs, pairs_path)
            out.artifacts.append(pairs_path)

            name = f"dpo_{variant.name}"
            if preset.dpo is not None and preset.dpo.search and len(pairs) >= 2:
                train, held = split_holdout(pairs, self.config.data.heldout_fraction, seed)
                result = dpo_hyperparameter_search(
                    sft, train, held, preset.optim, dpo=preset.dpo, lora=preset.lora, seed=seed,
                )
                trained = result.checkpoint.copy(metadata=f"dpo:{variant.name}")
                out.artifacts.append(save_checkpoint(trained, self.checkpoint_path(name)))
                out.checks[f"dpo_search_{variant.name}"] = {
                    "best": dataclasses.asdict(result.best),
                    "scores": [[dataclasses.asdict(c), a] for c, a in result.scores],
                }
            else:
                _, artifacts = self._train(sft, pairs, Stage.DPO, preset, name, f"dpo:{variant.name}", 50 + index)
                out.artifacts += artifacts
        return out

    def _available_models(self) -> List[str]:
        names = ["base"] + [f"branch_{b.name}" for b in self.config.data.branches]
        for prefix in ("merged", "sft", "dpo"):
            names += [f"{prefix}_{v.name}" for v in self.config.merge.variants]
        return [n for n in names if self.checkpoint_path(n).exists()]

    def _heldout_by_script(self) -> Dict[str, List[np.ndarray]]:
        path = self.path("data", "heldout.jsonl")
        if path.exists():
            records = read_jsonl(path, SentenceRecord)
        else:
            data = self.config.data
            records = self._corpus(data.eval_sentences, data.latin_ratio, 0.0, data.seed + 2000,
                                   CorpusDomain.BRANCH_ARABIC)
        by_script: Dict[str, List[np.ndarray]] = {}
        for record in records:
            ids = self.tokenizer.encode(record.text, add_begin=True, add_end=True)
            by_script.setdefault(record.script, []).append(ids)
        return by_script

    def _run_eval(self) -> StageOutput:
        names = self._available_models()
        if not names:
            raise MissingStageInputError("checkpoint")
        ev = self.config.eval
        suite = resolve_suite(ev.suite, self.config.seed, ev.mc_examples, ev.generation_examples)
        heldout = self._heldout_by_script()

        out = StageOutput()
        for name in names:
            checkpoint = load_checkpoint(self.checkpoint_path(name))
            model = TransformerModel(checkpoint, trainable=False)
            report = run_benchmark(model, suite, seed=self.config.seed,
                                   max_new_tokens=ev.max_new_tokens, temperature=ev.temperature)
            for script in (ScriptLabel.ARABIC.value, ScriptLabel.LATIN.value):
                sequences = [s[: checkpoint.config.max_context + 1] for s in heldout.get(script, [])]
                if sequences:
                    report.tasks[f"perplexity-{script}"] = {"perplexity": perplexity(model, sequences)}
            report.metadata["model"] = name
            out.artifacts.append(report.save(self.path("reports", f"{name}.json")))
        return out

    def _run_route(self) -> StageOutput:
        names = [n for n in self._available_models() if n.split("_", 1)[0] in ("merged", "sft", "dpo")]
        if not names:
            raise MissingStageInputError("checkpoint")
        spec = CorpusSpec(
            n_sentences=self.config.eval.routing_sentences,
            latin_ratio=0.5,
            seed=self.config.seed + 3000,
            domain=CorpusDomain.BRANCH_ARABIC,
        )
        sentences = [s.text for s in generate_corpus(spec)]

        out = StageOutput()
        for name in names:
            checkpoint = load_checkpoint(self.checkpoint_path(name))
            traces = collect_traces(TransformerModel(checkpoint, trainable=False), sentences, self.tokenizer)
            summary: Dict[str, Any] = {"model": name, "layers": []}
            for trace in traces:
                trace_path = self.path("traces", f"{name}.layer{trace.layer}.trace")
                write_trace(trace, trace_path)
                out.artifacts.append(trace_path)
                stats = routing_stats(trace)
                summary["layers"].append({
                    "layer": trace.layer,
                    "stats": stats.to_dict(),
                    "specialization": specialization_score(stats, ["arabic", "latin"]),
                    "load_balance": load_balance_loss(trace),
                })
            path = self.path("routing", f"{name}.json")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
            out.artifacts.append(path)
            logger.info(
                "routing_analyzed",
                model=name,
                specialization=[round(layer["specialization"], 4) for layer in summary["layers"]],
            )
        return out


def collect_traces(model: TransformerModel, sentences: Sequence[str], tokenizer: ByteTokenizer) -> List[RoutingTrace]:
    """Traces de routage par couche, une séquence par phrase."""
    merged: List[RoutingTrace] = []
    with no_grad():
        for index, sentence in enumerate(sentences):
            ids = tokenizer.encode(sentence, add_begin=True, add_end=True)[: model.config.max_context]
            output = model.forward(ids[None, :], collect_traces=True)
            for layer, trace in enumerate(output.traces):
                tokens = [dataclasses.replace(t, sequence=index) for t in trace.tokens]
                if layer == len(merged):
                    merged.append(RoutingTrace(trace.n_experts, trace.top_k, trace.layer))
                merged[layer].tokens.extend(tokens)
    return merged


def run_pipeline(
    config: ExperimentConfig,
    stages: Optional[Sequence[str]] = None,
    output_dir: Optional[Path] = None,
) -> PipelineManifest:
    """Exécute le pipeline (voir PipelineRunner.run)."""
    return PipelineRunner(config, output_dir).run(stages)


def load_reports(output_dir: Path) -> Dict[str, MetricReport]:
    """Rapports écrits par l'étape eval, par modèle."""
    reports_dir = Path(output_dir) / "reports"
    if not reports_dir.exists():
        return {}
    return {p.stem: MetricReport.load(p) for p in sorted(reports_dir.glob("*.json"))}
