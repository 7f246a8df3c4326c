"""
Boucle d'entraînement par étape.

Étapes:
    base    pré-entraînement du modèle de base (flux de tokens)
    cpt     pré-entraînement continu d'une branche
    anneal  annealing sur un sous-ensemble propre
    sft     fine-tuning supervisé (réponses seulement)
    dpo     alignement par préférences

Un pas d'optimiseur consomme effective_batch unités (fenêtres de tokens,
conversations ou paires), découpées en micro-lots. Chaque micro-lot a sa
propre bande; les gradients s'accumulent sur les feuilles.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from btxforge.core.tensor import GradTape, backward, mul
from btxforge.core.tokenizer import encode_sentences
from btxforge.core.transformer import Checkpoint, TransformerModel
from btxforge.data.records import Conversation, PreferencePair
from btxforge.errors import DivergenceError, NonFiniteError, StageDataError
from btxforge.merge.lora import LoraAdapter, init_adapters, materialize_lora
from btxforge.training.losses import LossParts, dpo_terms, lm_loss, sft_loss_parts
from btxforge.training.optim import AdamState, adamw_step, lr_schedule
from btxforge.training.preference import preference_accuracy
from btxforge.utils.config import DpoConfig, LoraConfig, OptimConfig
from btxforge.utils.metrics import TrainingMetrics

logger = structlog.get_logger(__name__)

CURVE_COLUMNS = ("step", "stage", "lr", "loss", "aux_loss")
DEFAULT_DPO_LORA = LoraConfig(rank=8, alpha=16)


class Stage(str, Enum):
    """Étape d'entraînement."""
    BASE = "base"
    CPT = "cpt"
    ANNEAL = "anneal"
    SFT = "sft"
    DPO = "dpo"

    @property
    def uses_token_stream(self) -> bool:
        return self in (Stage.BASE, Stage.CPT, Stage.ANNEAL)


# ============================================================================
# Courbe de perte
# ============================================================================

@dataclass(frozen=True)
class LossRecord:
    """Une ligne de courbe (un pas d'optimiseur)."""
    step: int
    stage: str
    lr: float
    loss: float
    aux_loss: float = 0.0


@dataclass
class LossCurve:
    """Courbe de perte d'une étape."""
    records: List[LossRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: LossRecord) -> None:
        self.records.append(record)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def head_mean(self, n: int = 5) -> float:
        return float(np.mean(self.losses[:n]))

    def tail_mean(self, n: int = 5) -> float:
        return float(np.mean(self.losses[-n:]))

    def write_tsv(self, path: Union[str, Path]) -> Path:
        """Une ligne par pas: step, stage, lr, loss, aux_loss (tabulations)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["\t".join(CURVE_COLUMNS)]
        for r in self.records:
            lines.append(f"{r.step}\t{r.stage}\t{r.lr:.9g}\t{r.loss:.9g}\t{r.aux_loss:.9g}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read_tsv(cls, path: Union[str, Path]) -> "LossCurve":
        curve = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
            if not line.strip():
                continue
            step, stage, lr, loss, aux = line.split("\t")
            curve.append(LossRecord(int(step), stage, float(lr), float(loss), float(aux)))
        return curve


# ============================================================================
# Données
# ============================================================================

def token_windows(texts: Sequence[str], seq_len: int) -> np.ndarray:
    """
    Découpe un flux [BEGIN] + octets + [END] concaténé en fenêtres de seq_len + 1.

    Raises:
        StageDataError: Flux plus court qu'une fenêtre
    """
    stream = np.concatenate(encode_sentences(list(texts))) if texts else np.zeros(0, dtype=np.int64)
    width = seq_len + 1
    n_windows = stream.shape[0] // width
    if n_windows == 0:
        raise StageDataError(f"token stream of {stream.shape[0]} tokens is shorter than one window ({width})")
    return stream[: n_windows * width].reshape(n_windows, width)


def _prepare_units(stage: Stage, dataset: Any, seq_len: int) -> Union[np.ndarray, List[Any]]:
    if dataset is None or len(dataset) == 0:
        raise StageDataError(f"stage {stage.value} got an empty dataset")

    if stage.uses_token_stream:
        if isinstance(dataset, np.ndarray):
            if dataset.ndim != 2 or dataset.shape[1] < 2:
                raise StageDataError(f"token windows must be [N x (T+1)], got {dataset.shape}")
            return dataset.astype(np.int64)
        if all(isinstance(item, str) for item in dataset):
            return token_windows(dataset, seq_len)
        raise StageDataError(f"stage {stage.value} needs token streams (texts or windows)")

    expected = Conversation if stage == Stage.SFT else PreferencePair
    if not all(isinstance(item, expected) for item in dataset):
        raise StageDataError(f"stage {stage.value} needs {expected.__name__} records")
    return list(dataset)


# ============================================================================
# Accumulation
# ============================================================================

LossFn = Callable[[TransformerModel, Any], LossParts]


def accumulate_gradients(
    model: TransformerModel,
    batches: Sequence[Any],
    loss_fn: LossFn,
    weights: Optional[Sequence[float]] = None,
) -> List[LossParts]:
    """
    Accumule les gradients de plusieurs micro-lots sur les feuilles du modèle.

    Args:
        model: Modèle (gradients remis à zéro au préalable)
        batches: Micro-lots
        loss_fn: Perte d'un micro-lot
        weights: Poids par micro-lot (1/len(batches) par défaut)

    Returns:
        Composantes de perte par micro-lot
    """
    model.zero_grad()
    weights = weights if weights is not None else [1.0 / len(batches)] * len(batches)
    parts: List[LossParts] = []
    for batch, weight in zip(batches, weights):
        with GradTape():
            part = loss_fn(model, batch)
            backward(mul(part.total, weight))
        parts.append(part)
    return parts


# ============================================================================
# Entraîneur
# ============================================================================

class Trainer:
    """
    Entraîneur d'une étape.

    Gèle les poids de base quand des adaptateurs LoRA sont utilisés
    (les routeurs MoE restent entraînables) et les replie à la fin.
    """

    def __init__(
        self,
        checkpoint: Checkpoint,
        stage: Union[Stage, str],
        optim: OptimConfig,
        lora: Optional[LoraConfig] = None,
        seed: int = 0,
        dpo: Optional[DpoConfig] = None,
        metrics: Optional[TrainingMetrics] = None,
    ):
        """
        Args:
            checkpoint: Point de départ
            stage: Étape
            optim: Optimiseur et planning
            lora: Adaptateurs (None = fine-tuning complet)
            seed: Graine (ordre des données, adaptateurs)
            dpo: Réglages DPO (étape dpo)
            metrics: Collecteur Prometheus
        """
        self.stage = Stage(stage)
        self.seed = seed
        self.dpo = dpo or DpoConfig()
        self.metrics = metrics
        self.start = checkpoint
        self.optim = optim
        if self.stage == Stage.DPO:
            self.optim = optim.model_copy(update={"peak_lr": self.dpo.lr})

        self.lora = lora
        self.adapters: Dict[str, LoraAdapter] = {}
        if lora is not None:
            self.adapters = init_adapters(checkpoint, lora, seed)
        self.model = TransformerModel(
            checkpoint,
            trainable=True,
            adapters={n: (a.a, a.b) for n, a in self.adapters.items()},
            lora_scaling=lora.scaling if lora is not None else 1.0,
        )
        self.reference = TransformerModel(checkpoint, trainable=False) if self.stage == Stage.DPO else None

        self.state = AdamState()
        self.curve = LossCurve()
        self._step_callbacks: List[Callable[[LossRecord], None]] = []

        logger.info(
            "trainer_initialized",
            stage=self.stage.value,
            lora=lora is not None,
            trainable=len(self.model.trainable_tensors()),
            seed=seed,
        )

    def on_step(self, callback: Callable[[LossRecord], None]) -> None:
        """Enregistre un callback appelé après chaque pas."""
        self._step_callbacks.append(callback)

    def _loss_fn(self) -> LossFn:
        if self.stage.uses_token_stream:
            return lm_loss
        if self.stage == Stage.SFT:
            return sft_loss_parts
        beta = self.dpo.beta

        def _dpo(model: TransformerModel, pair: PreferencePair) -> LossParts:
            terms = dpo_terms(model, self.reference, pair, beta)
            return LossParts(total=terms.loss, ce=terms.loss.item())

        return _dpo

    def total_steps(self, n_units: int) -> int:
        if self.optim.steps is not None:
            return self.optim.steps
        return max(1, math.ceil(self.optim.epochs * n_units / self.optim.effective_batch))

    def _unit_order(self, n_units: int, total_steps: int) -> np.ndarray:
        """Ordre des unités: permutations successives (une par passe)."""
        rng = np.random.default_rng([self.seed, 7])
        needed = total_steps * self.optim.effective_batch
        passes = [rng.permutation(n_units) for _ in range(math.ceil(needed / n_units))]
        return np.concatenate(passes)[:needed]

    def _micro_batches(self, units: Union[np.ndarray, List[Any]], picked: np.ndarray) -> List[Any]:
        if isinstance(units, np.ndarray):
            size = self.optim.micro_batch
            return [units[picked[i:i + size]] for i in range(0, len(picked), size)]
        return [units[int(i)] for i in picked]

    def _apply_update(self, lr: float) -> None:
        leaves = self.model.trainable_tensors()
        params = {name: t.data for name, t in leaves.items()}
        grads = {name: t.grad for name, t in leaves.items()}
        new_params, self.state = adamw_step(params, grads, self.state, lr, self.optim)
        for name, tensor in leaves.items():
            tensor.data = new_params[name]
        self.model.zero_grad()

    def train_step(self, step: int, total_steps: int, micro_batches: Sequence[Any]) -> LossRecord:
        """
        Un pas d'optimiseur.

        Raises:
            DivergenceError: Perte ou activation non finie
        """
        lr = lr_schedule(step - 1, total_steps, self.optim)  # pas 1 → lr(0)
        sizes = [len(b) if isinstance(b, np.ndarray) else 1 for b in micro_batches]
        total = float(sum(sizes))
        weights = [s / total for s in sizes]
        try:
            parts = accumulate_gradients(self.model, micro_batches, self._loss_fn(), weights)
        except NonFiniteError as e:
            self._diverged(step, str(e))

        loss = float(sum(w * p.total.item() for w, p in zip(weights, parts)))
        aux = float(sum(w * p.aux for w, p in zip(weights, parts)))
        if not math.isfinite(loss):
            self._diverged(step, "non-finite loss")

        self._apply_update(lr)
        record = LossRecord(step=step, stage=self.stage.value, lr=lr, loss=loss, aux_loss=aux)
        self.curve.append(record)
        if self.metrics is not None:
            self.metrics.record_step(self.stage.value, lr, loss, aux)
        for callback in self._step_callbacks:
            callback(record)
        logger.debug("optimizer_step", stage=self.stage.value, step=step, lr=lr, loss=loss, aux_loss=aux)
        return record

    def _diverged(self, step: int, reason: str) -> NoReturn:
        logger.error("training_diverged", stage=self.stage.value, step=step, reason=reason)
        if self.metrics is not None:
            self.metrics.record_divergence(self.stage.value)
        raise DivergenceError(step, self.stage.value)

    def fit(self, dataset: Any, metadata: Optional[str] = None) -> Tuple[Checkpoint, LossCurve]:
        """
        Entraîne sur un jeu de données.

        Args:
            dataset: Textes ou fenêtres (base/cpt/anneal), Conversations (sft),
                PreferencePairs (dpo)
            metadata: Provenance du checkpoint produit

        Returns:
            (checkpoint entraîné, courbe de perte)

        Raises:
            StageDataError: Jeu vide ou de mauvais type
            DivergenceError: Perte non finie
        """
        seq_len = min(self.optim.seq_len, self.model.config.max_context)
        units = _prepare_units(self.stage, dataset, seq_len)
        n_units = len(units)
        total = self.total_steps(n_units)
        order = self._unit_order(n_units, total)
        batch = self.optim.effective_batch

        logger.info("stage_started", stage=self.stage.value, units=n_units, steps=total)
        for step in range(1, total + 1):
            picked = order[(step - 1) * batch: step * batch]
            self.train_step(step, total, self._micro_batches(units, picked))

        checkpoint = self.result(metadata)
        logger.info(
            "stage_completed",
            stage=self.stage.value,
            steps=total,
            first_loss=self.curve.records[0].loss,
            last_loss=self.curve.records[-1].loss,
        )
        return checkpoint, self.curve

    def result(self, metadata: Optional[str] = None) -> Checkpoint:
        """Checkpoint courant, adaptateurs repliés."""
        metadata = metadata or f"{self.start.metadata}+{self.stage.value}"
        checkpoint = self.model.to_checkpoint(metadata)
        if not self.adapters:
            return checkpoint
        trained = {
            name: LoraAdapter(a=a.data.copy(), b=b.data.copy(), alpha=self.adapters[name].alpha,
                              rank=self.adapters[name].rank)
            for name, (a, b) in self.model.adapters.items()
        }
        return materialize_lora(checkpoint, trained)

    def get_stats(self) -> Dict[str, Any]:
        """Statistiques de l'entraîneur."""
        return {
            "stage": self.stage.value,
            "steps": len(self.curve),
            "lora": self.lora is not None,
            "adapters": len(self.adapters),
            "last_loss": self.curve.records[-1].loss if self.curve.records else None,
        }


def train_stage(
    checkpoint: Checkpoint,
    dataset: Any,
    stage: Union[Stage, str],
    optim: OptimConfig,
    lora: Optional[LoraConfig] = None,
    seed: int = 0,
    dpo: Optional[DpoConfig] = None,
    metrics: Optional[TrainingMetrics] = None,
    metadata: Optional[str] = None,
) -> Tuple[Checkpoint, LossCurve]:
    """Entraîne une étape (voir Trainer.fit)."""
    trainer = Trainer(checkpoint, stage, optim, lora=lora, seed=seed, dpo=dpo, metrics=metrics)
    return trainer.fit(dataset, metadata=metadata)


# ============================================================================
# Recherche d'hyperparamètres DPO
# ============================================================================

@dataclass(frozen=True)
class DpoCandidate:
    """Point de la grille DPO."""
    lr: float
    beta: float
    full_finetune: bool


@dataclass
class DpoSearchResult:
    """Résultat de la recherche: scores dans l'ordre de la grille."""
    scores: List[Tuple[DpoCandidate, float]]
    best: DpoCandidate
    checkpoint: Checkpoint

    @property
    def best_accuracy(self) -> float:
        return dict(self.scores)[self.best]


DPO_GRID: Tuple[DpoCandidate, ...] = tuple(
    DpoCandidate(lr=lr, beta=beta, full_finetune=full)
    for lr in (3e-6, 5e-6)
    for beta in (0.1, 0.5)
    for full in (True, False)
)


def dpo_hyperparameter_search(
    checkpoint: Checkpoint,
    train_pairs: Sequence[PreferencePair],
    heldout_pairs: Sequence[PreferencePair],
    optim: OptimConfig,
    dpo: Optional[DpoConfig] = None,
    lora: Optional[LoraConfig] = None,
    seed: int = 0,
    grid: Sequence[DpoCandidate] = DPO_GRID,
) -> DpoSearchResult:
    """
    Entraîne chaque point de la grille et garde la meilleure exactitude de
    préférence sur les paires réservées (égalités: ordre de la grille).

    Args:
        checkpoint: Politique de départ (aussi référence)
        train_pairs: Paires d'entraînement
        heldout_pairs: Paires d'évaluation
        optim: Optimiseur de l'étape dpo
        dpo: Réglages DPO de base (lr et beta remplacés par la grille)
        lora: Adaptateurs des candidats non complets
        seed: Graine
        grid: Points à évaluer
    """
    base = dpo or DpoConfig()
    reference = TransformerModel(checkpoint, trainable=False)

    scores: List[Tuple[DpoCandidate, float]] = []
    best: Optional[Tuple[DpoCandidate, float, Checkpoint]] = None
    for candidate in grid:
        cfg = base.model_copy(update={
            "lr": candidate.lr,
            "beta": candidate.beta,
            "full_finetune": candidate.full_finetune,
        })
        adapters = None if candidate.full_finetune else (lora or DEFAULT_DPO_LORA)
        trained, _ = train_stage(checkpoint, train_pairs, Stage.DPO, optim, lora=adapters, seed=seed, dpo=cfg)
        accuracy = preference_accuracy(
            TransformerModel(trained, trainable=False), reference, heldout_pairs, candidate.beta
        )
        scores.append((candidate, accuracy))
        logger.info("dpo_candidate_scored", lr=candidate.lr, beta=candidate.beta,
                    full_finetune=candidate.full_finetune, accuracy=accuracy)
        if best is None or accuracy > best[1]:
            best = (candidate, accuracy, trained)

    if best is None:
        raise StageDataError("DPO search grid is empty")
    return DpoSearchResult(scores=scores, best=best[0], checkpoint=best[2])
