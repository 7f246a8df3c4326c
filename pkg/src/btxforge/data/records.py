"""
Enregistrements de données et entrées/sorties JSONL.

Formats (un enregistrement JSON par ligne):
    - conversation: {"messages": [{"role", "content"}, ...]}
    - parallèle: {"src", "tgt", "src_lang", "tgt_lang"}
    - préférence: {"prompt": [...], "chosen", "rejected"}
    - phrase: {"text", "script", "domain"}
"""

from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from btxforge.errors import DataValidationError

logger = structlog.get_logger(__name__)

RecordT = TypeVar("RecordT", bound=BaseModel)
T = TypeVar("T")


class Role(str, Enum):
    """Rôle d'un participant."""
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class Message(BaseModel):
    """Message d'une conversation."""
    model_config = ConfigDict(frozen=True)

    role: Role
    content: str


class Conversation(BaseModel):
    """
    Conversation ordonnée (unité des données SFT).

    L'alternance des rôles n'est pas imposée ici: elle est vérifiée
    par validate_conversations, qui rapporte au lieu de lever.
    """

    messages: List[Message]
    id: Optional[str] = None
    category: Optional[str] = None
    src: Optional[str] = None
    tgt: Optional[str] = None
    src_lang: Optional[str] = None
    tgt_lang: Optional[str] = None

    @property
    def has_pair(self) -> bool:
        return self.src is not None and self.tgt is not None

    def assistant_contents(self) -> List[str]:
        return [m.content for m in self.messages if m.role == Role.ASSISTANT]

    def last_assistant_index(self) -> Optional[int]:
        for i in range(len(self.messages) - 1, -1, -1):
            if self.messages[i].role == Role.ASSISTANT:
                return i
        return None


ConversationRecord = Conversation


class ParallelRecord(BaseModel):
    """Paire source/cible (traduction ou translittération)."""

    src: str
    tgt: str
    src_lang: str
    tgt_lang: str


class PreferencePair(BaseModel):
    """Paire de préférence DPO."""

    prompt: List[Message]
    chosen: str
    rejected: str
    id: Optional[str] = None

    @model_validator(mode="after")
    def _check_pair(self) -> "PreferencePair":
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected completions must differ")
        if not self.prompt or self.prompt[-1].role != Role.USER:
            raise ValueError("prompt must end with a user message")
        return self


PreferenceRecord = PreferencePair


class SentenceRecord(BaseModel):
    """Phrase de corpus étiquetée."""

    text: str
    script: str
    domain: str


def write_jsonl(records: Iterable[BaseModel], path: Union[str, Path]) -> int:
    """
    Écrit des enregistrements, un JSON par ligne (UTF-8, champs nuls omis).

    Returns:
        Nombre d'enregistrements écrits
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json(exclude_none=True))
            f.write("\n")
            count += 1
    logger.debug("jsonl_written", path=str(path), records=count)
    return count


def read_jsonl(path: Union[str, Path], model: Type[RecordT]) -> List[RecordT]:
    """
    Lit un fichier JSONL en modèles pydantic.

    Raises:
        DataValidationError: Ligne invalide (numéro de ligne dans le message)
    """
    records: List[RecordT] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(model.model_validate_json(line))
            except ValidationError as e:
                raise DataValidationError(f"{path}:{line_no}: {e.errors()[0]['msg']}") from e
    return records


def split_holdout(
    records: Sequence[T],
    fraction: float = 0.1,
    seed: int = 0,
) -> Tuple[List[T], List[T]]:
    """
    Sépare un jeu d'évaluation (10 % par défaut), ordre d'origine conservé.

    Args:
        records: Enregistrements
        fraction: Part réservée, dans ]0, 1[
        seed: Graine de la permutation

    Returns:
        (entraînement, réservé)
    """
    if not 0.0 < fraction < 1.0:
        raise DataValidationError(f"holdout fraction must be in (0, 1), got {fraction}")

    n = len(records)
    n_holdout = min(max(int(round(fraction * n)), 1), n - 1) if n >= 2 else 0
    picked = set(np.random.default_rng(seed).permutation(n)[:n_holdout].tolist())

    train = [r for i, r in enumerate(records) if i not in picked]
    heldout = [r for i, r in enumerate(records) if i in picked]
    return train, heldout
