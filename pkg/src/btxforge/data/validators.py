"""
Validateurs de post-traitement des conversations.

Règles appliquées dans l'ordre (première règle en échec retenue):
    1. role-flow: système optionnel en tête, puis alternance stricte
       user/assistant commençant par user
    2. empty-message: aucun contenu vide
    3. length-ratio: pour les paires source/cible,
       min(|s|, |t|) / max(|s|, |t|) >= 0.7 (en caractères)
    4. no-assistant-reply: la conversation se termine par une réponse
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import structlog

from btxforge.data.records import Conversation, Role
from btxforge.errors import DataValidationError

logger = structlog.get_logger(__name__)

MIN_LENGTH_RATIO = 0.7

RULE_ROLE_FLOW = "role-flow"
RULE_EMPTY_MESSAGE = "empty-message"
RULE_LENGTH_RATIO = "length-ratio"
RULE_NO_ASSISTANT_REPLY = "no-assistant-reply"


@dataclass(frozen=True)
class Rejection:
    """Enregistrement rejeté."""
    record_id: str
    rule: str
    detail: str = ""


@dataclass
class ValidationReport:
    """Résultat de validation."""
    accepted: List[Conversation] = field(default_factory=list)
    rejections: List[Rejection] = field(default_factory=list)

    @property
    def n_rejected(self) -> int:
        return len(self.rejections)

    def by_rule(self) -> dict:
        counts: dict = {}
        for r in self.rejections:
            counts[r.rule] = counts.get(r.rule, 0) + 1
        return counts


def _role_flow_error(conversation: Conversation) -> Optional[str]:
    roles = [m.role for m in conversation.messages]
    if roles and roles[0] == Role.SYSTEM:
        roles = roles[1:]
    if not roles:
        return "no user/assistant messages"
    for i, role in enumerate(roles):
        expected = Role.USER if i % 2 == 0 else Role.ASSISTANT
        if role != expected:
            return f"message {i}: expected {expected.value}, got {role.value}"
    return None


def length_ratio(source: str, target: str) -> float:
    """Rapport de longueur en caractères, dans [0, 1]."""
    longest = max(len(source), len(target))
    if longest == 0:
        return 1.0
    return min(len(source), len(target)) / longest


def check_conversation(conversation: Conversation) -> Optional[Rejection]:
    """Première règle violée, ou None."""
    record_id = conversation.id or ""

    error = _role_flow_error(conversation)
    if error:
        return Rejection(record_id, RULE_ROLE_FLOW, error)

    for i, message in enumerate(conversation.messages):
        if not message.content.strip():
            return Rejection(record_id, RULE_EMPTY_MESSAGE, f"message {i} ({message.role.value})")

    if conversation.has_pair:
        ratio = length_ratio(conversation.src or "", conversation.tgt or "")
        if ratio < MIN_LENGTH_RATIO:
            return Rejection(record_id, RULE_LENGTH_RATIO, f"ratio {ratio:.3f}")

    # dernier tour utilisateur sans réponse
    if conversation.messages[-1].role != Role.ASSISTANT:
        return Rejection(record_id, RULE_NO_ASSISTANT_REPLY, "conversation ends on a user message")

    return None


def validate_conversations(dataset: Sequence[Conversation]) -> ValidationReport:
    """
    Valide un jeu de conversations.

    Args:
        dataset: Conversations (l'identifiant par défaut est l'index)

    Returns:
        Conversations acceptées et rapport de rejets (règle + identifiant)
    """
    report = ValidationReport()
    for index, conversation in enumerate(dataset):
        rejection = check_conversation(conversation)
        if rejection is None:
            report.accepted.append(conversation)
            continue
        if not rejection.record_id:
            rejection = Rejection(str(index), rejection.rule, rejection.detail)
        report.rejections.append(rejection)

    logger.info(
        "conversations_validated",
        total=len(dataset),
        accepted=len(report.accepted),
        rejected=report.by_rule(),
    )
    return report


def word_count(text: str) -> int:
    return len(text.split())


def filter_by_length(texts: Sequence[str], min_words: int, max_words: int) -> List[str]:
    """
    Garde les textes dont le nombre de mots est dans [min_words, max_words].

    Raises:
        DataValidationError: min_words > max_words
    """
    if min_words > max_words:
        raise DataValidationError(f"min_words ({min_words}) > max_words ({max_words})")
    return [t for t in texts if min_words <= word_count(t) <= max_words]
