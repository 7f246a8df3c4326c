"""
Harnais d'évaluation.

Choix multiples par log-vraisemblance:
    raw         somme des log-probabilités des tokens de la réponse
    normalized  même somme divisée par le nombre de caractères de la réponse
Égalités: indice le plus bas.

Génération: décodage (graine fixe par exemple), BLEU et chrF corpus.

Manifeste de suite (YAML):
    tasks:
      - name: completion-arabic
        type: mc                   # ou generation
        fixture: completion-arabic.jsonl
        apply_chat_template: true
"""

from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import structlog
import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from btxforge.core.tensor import no_grad
from btxforge.core.tokenizer import BEGIN, ByteTokenizer, serialize_messages
from btxforge.core.transformer import Checkpoint, TransformerModel, generate
from btxforge.data.corpus import Language, convert, egyptian_sentences
from btxforge.data.records import Message, Role, read_jsonl, write_jsonl
from btxforge.data.templates import Task, instantiate_template
from btxforge.errors import ConfigValidationError, MetricInputError
from btxforge.evaluation.metrics import bleu, chrf
from btxforge.evaluation.report import MetricReport

logger = structlog.get_logger(__name__)

N_CHOICES = 4


class ScoreMode(str, Enum):
    """Mode de score des choix multiples."""
    RAW = "raw"
    NORMALIZED = "normalized"


class TaskType(str, Enum):
    MC = "mc"
    GENERATION = "generation"


# ============================================================================
# Tâches
# ============================================================================

class McTask(BaseModel):
    """Exemple à choix multiples."""

    context: str
    choices: List[str] = Field(min_length=2)
    gold: int = Field(ge=0)
    apply_chat_template: bool = True

    @field_validator("choices")
    @classmethod
    def _choices_not_empty(cls, choices: List[str]) -> List[str]:
        if any(not c for c in choices):
            raise ValueError("choices must be non-empty strings")
        return choices

    @model_validator(mode="after")
    def _gold_in_range(self) -> "McTask":
        if self.gold >= len(self.choices):
            raise ValueError(f"gold index {self.gold} out of range for {len(self.choices)} choices")
        return self


class GenerationTask(BaseModel):
    """Exemple de génération évalué contre une référence."""

    prompt: str
    reference: str
    apply_chat_template: bool = True


class TaskSpec(BaseModel):
    """Tâche nommée d'une suite."""

    name: str
    type: TaskType
    examples: List[Union[McTask, GenerationTask]]

    @model_validator(mode="after")
    def _examples_match_type(self) -> "TaskSpec":
        expected = McTask if self.type == TaskType.MC else GenerationTask
        if not all(isinstance(e, expected) for e in self.examples):
            raise ValueError(f"task {self.name}: examples must all be {expected.__name__}")
        return self


class BenchmarkSuite(BaseModel):
    """Suite ordonnée de tâches."""

    tasks: List[TaskSpec] = Field(default_factory=list)

    @property
    def mc_tasks(self) -> List[TaskSpec]:
        return [t for t in self.tasks if t.type == TaskType.MC]

    @property
    def generation_tasks(self) -> List[TaskSpec]:
        return [t for t in self.tasks if t.type == TaskType.GENERATION]


def load_suite(path: Union[str, Path]) -> BenchmarkSuite:
    """
    Charge une suite depuis son manifeste YAML; les fixtures JSONL sont
    relatives au dossier du manifeste.

    Raises:
        ConfigValidationError: Manifeste ou fixture invalide
    """
    path = Path(path)
    try:
        manifest = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        tasks = []
        for entry in manifest.get("tasks", []):
            task_type = TaskType(entry["type"])
            model = McTask if task_type == TaskType.MC else GenerationTask
            examples = read_jsonl(path.parent / entry["fixture"], model)
            if "apply_chat_template" in entry:
                examples = [
                    e.model_copy(update={"apply_chat_template": bool(entry["apply_chat_template"])})
                    for e in examples
                ]
            tasks.append(TaskSpec(name=entry["name"], type=task_type, examples=examples))
    except (OSError, KeyError, ValueError, yaml.YAMLError) as e:
        raise ConfigValidationError([f"{path}: {e}"]) from e
    return BenchmarkSuite(tasks=tasks)


def save_suite(suite: BenchmarkSuite, directory: Union[str, Path]) -> Path:
    """Écrit les fixtures et le manifeste `suite.yaml`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for task in suite.tasks:
        fixture = f"{task.name}.jsonl"
        write_jsonl(task.examples, directory / fixture)
        chat = task.examples[0].apply_chat_template if task.examples else True
        entries.append({
            "name": task.name,
            "type": task.type.value,
            "fixture": fixture,
            "apply_chat_template": chat,
        })
    manifest = directory / "suite.yaml"
    manifest.write_text(yaml.safe_dump({"tasks": entries}, allow_unicode=True, sort_keys=False), encoding="utf-8")
    return manifest


# ============================================================================
# Choix multiples
# ============================================================================

def context_ids(text: str, apply_chat_template: bool) -> np.ndarray:
    """Contexte sérialisé: message user + en-tête assistant, ou BEGIN + octets."""
    if apply_chat_template:
        return serialize_messages([Message(role=Role.USER, content=text)], add_generation_prompt=True).ids
    return np.concatenate([[BEGIN], ByteTokenizer().encode(text)]).astype(np.int64)


def token_logprobs(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """log softmax(logits)[cible] par position (float64)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    return shifted[np.arange(len(targets)), targets] - log_norm


def choice_logprobs(model: TransformerModel, task: McTask) -> np.ndarray:
    """Log-vraisemblance sommée de chaque choix sachant le contexte."""
    prefix = context_ids(task.context, task.apply_chat_template)
    tokenizer = ByteTokenizer()
    scores = np.zeros(len(task.choices), dtype=np.float64)
    with no_grad():
        for i, choice in enumerate(task.choices):
            completion = tokenizer.encode(choice)
            ids = np.concatenate([prefix, completion])
            logits = model.forward(ids[None, :-1]).logits.data[0]
            start = len(prefix) - 1
            scores[i] = token_logprobs(logits[start:], ids[len(prefix):]).sum()
    return scores


def pick_choice(scores: Sequence[float]) -> int:
    """Argmax strict: égalités vers l'indice le plus bas."""
    best = 0
    for i, score in enumerate(scores):
        if score > scores[best]:
            best = i
    return best


def mc_score(
    model: Union[TransformerModel, Checkpoint],
    task: McTask,
    mode: Union[ScoreMode, str] = ScoreMode.RAW,
) -> int:
    """
    Indice du choix retenu.

    Raises:
        ContextOverflowError: Contexte + choix dépasse le contexte du modèle
    """
    model = model if isinstance(model, TransformerModel) else TransformerModel(model, trainable=False)
    scores = choice_logprobs(model, task)
    if ScoreMode(mode) == ScoreMode.NORMALIZED:
        scores = scores / np.asarray([len(c) for c in task.choices], dtype=np.float64)
    return pick_choice(scores.tolist())


# ============================================================================
# Benchmark
# ============================================================================

def _run_mc(model: TransformerModel, task: TaskSpec) -> dict:
    correct = correct_norm = 0
    for example in task.examples:
        scores = choice_logprobs(model, example)
        lengths = np.asarray([len(c) for c in example.choices], dtype=np.float64)
        correct += int(pick_choice(scores.tolist()) == example.gold)
        correct_norm += int(pick_choice((scores / lengths).tolist()) == example.gold)
    n = len(task.examples)
    return {"accuracy": correct / n, "accuracy_norm": correct_norm / n}


def _run_generation(
    model: TransformerModel,
    task: TaskSpec,
    seed: int,
    max_new_tokens: int,
    temperature: float,
) -> dict:
    tokenizer = ByteTokenizer()
    candidates, references = [], []
    for i, example in enumerate(task.examples):
        prompt = context_ids(example.prompt, example.apply_chat_template)
        budget = min(max_new_tokens, model.config.max_context - len(prompt))
        output = generate(
            model,
            prompt,
            max_new=max(budget, 0),
            mode="sample" if temperature > 0 else "greedy",
            temperature=temperature,
            seed=seed + i,
        )
        candidates.append(tokenizer.decode(output))
        references.append(example.reference)
    return {"bleu": bleu(candidates, references), "chrf": chrf(candidates, references)}


def run_benchmark(
    model: Union[TransformerModel, Checkpoint],
    suite: BenchmarkSuite,
    seed: int = 0,
    max_new_tokens: int = 64,
    temperature: float = 0.0,
) -> MetricReport:
    """
    Évalue un modèle sur une suite.

    Une tâche en échec est journalisée et consignée dans le rapport;
    l'exécution continue.

    Args:
        model: Modèle évalué
        suite: Tâches (ordre conservé)
        seed: Graine de génération
        max_new_tokens: Longueur maximale générée
        temperature: 0 = glouton

    Raises:
        MetricInputError: Suite vide
    """
    if not suite.tasks:
        raise MetricInputError("benchmark suite is empty")
    if isinstance(model, Checkpoint):
        metadata = model.metadata
        model = TransformerModel(model, trainable=False)
    else:
        metadata = model.metadata

    report = MetricReport(metadata={"checkpoint": metadata, "seed": seed})
    for task in suite.tasks:
        try:
            if not task.examples:
                raise MetricInputError(f"task {task.name} has no examples")
            if task.type == TaskType.MC:
                metrics = _run_mc(model, task)
            else:
                metrics = _run_generation(model, task, seed, max_new_tokens, temperature)
            report.tasks[task.name] = metrics
            logger.info("task_completed", task=task.name, **metrics)
        except Exception as e:
            logger.error("task_failed", task=task.name, error=str(e))
            report.errors[task.name] = str(e)

    return MetricReport.model_validate(report.model_dump())


# ============================================================================
# Suite synthétique
# ============================================================================

def _split_sentence(sentence: str, rng: np.random.Generator):
    words = sentence.split()
    cut = int(rng.integers(2, len(words) - 1))
    return " ".join(words[:cut]), " ".join(words[cut:])


def _completion_task(
    name: str,
    sentences: Sequence[str],
    rng: np.random.Generator,
    apply_chat_template: bool,
) -> TaskSpec:
    splits = [_split_sentence(s, rng) for s in sentences]
    examples = []
    for i, (context, ending) in enumerate(splits):
        others = [j for j in range(len(splits)) if splits[j][1] != ending]
        picked = rng.choice(len(others), size=min(N_CHOICES - 1, len(others)), replace=False)
        distractors = list(dict.fromkeys(splits[others[j]][1] for j in picked))
        gold = int(rng.integers(len(distractors) + 1))
        choices = distractors[:gold] + [ending] + distractors[gold:]
        examples.append(McTask(context=context, choices=choices, gold=gold,
                               apply_chat_template=apply_chat_template))
    return TaskSpec(name=name, type=TaskType.MC, examples=examples)


def _winogrande_task(sentences: Sequence[str], rng: np.random.Generator) -> TaskSpec:
    """Deux options pour un mot masqué; la suite de la phrase est scorée."""
    vocabulary = sorted({w for s in sentences for w in s.split()})
    examples = []
    for sentence in sentences:
        words = sentence.split()
        slot = int(rng.integers(1, len(words) - 1))
        true_word = words[slot]
        other = true_word
        while other == true_word:
            other = vocabulary[int(rng.integers(len(vocabulary)))]
        suffix = " ".join(words[slot + 1:])
        options = [f"{true_word} {suffix}", f"{other} {suffix}"]
        gold = int(rng.integers(2))
        if gold == 1:
            options.reverse()
        examples.append(McTask(
            context=" ".join(words[:slot]),
            choices=options,
            gold=gold,
            apply_chat_template=False,
        ))
    return TaskSpec(name="winogrande-style", type=TaskType.MC, examples=examples)


def _transliteration_task(
    name: str,
    sentences: Sequence[str],
    src: Language,
    tgt: Language,
    seed: int,
) -> TaskSpec:
    examples = []
    for i, sentence in enumerate(sentences):
        source = sentence if src == Language.EGYPTIAN else convert(sentence, Language.EGYPTIAN, src)
        conversation = instantiate_template(Task.TRANSLITERATE, source, src, tgt, seed=seed + i)
        examples.append(GenerationTask(
            prompt=conversation.messages[0].content,
            reference=conversation.messages[1].content,
        ))
    return TaskSpec(name=name, type=TaskType.GENERATION, examples=examples)


def build_synthetic_suite(seed: int, n_mc: int = 40, n_generation: int = 10) -> BenchmarkSuite:
    """
    Suite synthétique déterministe.

    Tâches:
        completion-arabic   complétion en écriture arabe (gabarit de chat)
        completion-latin    complétion en Arabizi (gabarit de chat)
        winogrande-style    mot masqué à deux options (sans gabarit)
        translit-to-latin   génération arabe → Arabizi
        translit-to-arabic  génération Arabizi → arabe
    """
    rng = np.random.default_rng([seed, 11])
    arabic = egyptian_sentences(n_mc, seed=seed + 101)
    latin = [convert(s, Language.EGYPTIAN, Language.FRANCO) for s in egyptian_sentences(n_mc, seed=seed + 102)]
    winogrande = egyptian_sentences(n_mc, seed=seed + 103)
    generation = egyptian_sentences(n_generation, seed=seed + 104)

    suite = BenchmarkSuite(tasks=[
        _completion_task("completion-arabic", arabic, rng, apply_chat_template=True),
        _completion_task("completion-latin", latin, rng, apply_chat_template=True),
        _winogrande_task(winogrande, rng),
        _transliteration_task("translit-to-latin", generation, Language.EGYPTIAN, Language.FRANCO, seed),
        _transliteration_task("translit-to-arabic", generation, Language.FRANCO, Language.EGYPTIAN, seed),
    ])
    logger.info("synthetic_suite_built", seed=seed, tasks=len(suite.tasks))
    return suite


def resolve_suite(path: Optional[Path], seed: int, n_mc: int, n_generation: int) -> BenchmarkSuite:
    """Suite d'un manifeste si fourni, sinon suite synthétique."""
    if path is not None:
        return load_suite(path)
    return build_synthetic_suite(seed, n_mc, n_generation)
