"""
Correcteur synthétique hors politique.

Réécrit en écriture arabe les mots latins isolés des réponses de l'assistant,
sauf les termes techniques qui restent en écriture latine.
"""

import re
from typing import Iterable, Optional

import structlog

from btxforge.data.records import Conversation, Message, Role
from btxforge.data.script import ScriptLabel, classify_script
from btxforge.data.transliteration import TransliterationTable, default_table

logger = structlog.get_logger(__name__)

# Termes conservés en écriture latine (comparaison insensible à la casse)
KEEP_IN_LATIN = ("WiFi", "code", "programming", "scroll", "subscribe", "remote", "meeting", "app", "USB")

_TOKEN = re.compile(r"(\s+)")


def _is_kept(word: str, allowlist: Iterable[str]) -> bool:
    return word.strip(".,!?;:()\"'").lower() in {w.lower() for w in allowlist}


def correct_text(
    text: str,
    table: Optional[TransliterationTable] = None,
    allowlist: Iterable[str] = KEEP_IN_LATIN,
) -> str:
    """Translittère vers l'arabe chaque mot latin hors liste de conservation."""
    table = table or default_table()
    parts = _TOKEN.split(text)
    for i, part in enumerate(parts):
        if not part or part.isspace():
            continue
        if classify_script(part).label == ScriptLabel.LATIN and not _is_kept(part, allowlist):
            parts[i] = table.to_arabic(part)
    return "".join(parts)


def synth_corrector(
    conversation: Conversation,
    table: Optional[TransliterationTable] = None,
    allowlist: Iterable[str] = KEEP_IN_LATIN,
) -> Conversation:
    """
    Corrige le contenu des messages assistant.

    Args:
        conversation: Conversation retenue par le filtre de code-switching
        table: Table de translittération
        allowlist: Termes à garder en écriture latine (insensible à la casse)

    Returns:
        Nouvelle conversation (messages user/system inchangés)
    """
    messages = [
        Message(role=m.role, content=correct_text(m.content, table, allowlist))
        if m.role == Role.ASSISTANT else m
        for m in conversation.messages
    ]
    changed = sum(1 for old, new in zip(conversation.messages, messages) if old != new)
    logger.debug("conversation_corrected", id=conversation.id, messages_changed=changed)
    return conversation.model_copy(update={"messages": messages})
