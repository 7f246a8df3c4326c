"""
Tokeniseur octet + sérialisation des conversations.

Vocabulaire fixe: 256 valeurs d'octet + 4 spéciaux.

Format de conversation (identifiants):
    BEGIN
    puis pour chaque message:
        SEP, octets UTF-8 du rôle, "\\n", octets du contenu
        END après le contenu d'un message assistant
Le masque de perte vaut 1 exactement sur les octets du contenu assistant,
plus le END qui le termine quand le contenu n'est pas vide.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import structlog

from btxforge.data.records import Conversation, Message, Role
from btxforge.data.script import ScriptLabel
from btxforge.errors import TokenRangeError

logger = structlog.get_logger(__name__)

PAD = 256
BEGIN = 257
END = 258
SEP = 259
VOCAB_SIZE = 260

NEWLINE = ord("\n")


@dataclass
class SerializedChat:
    """Conversation sérialisée: ids et masque aligné sur les ids."""
    ids: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def inputs(self) -> np.ndarray:
        return self.ids[:-1]

    @property
    def targets(self) -> np.ndarray:
        return self.ids[1:]

    @property
    def target_mask(self) -> np.ndarray:
        return self.loss_mask[1:]


class ByteTokenizer:
    """Tokeniseur octet sans apprentissage."""

    vocab_size = VOCAB_SIZE

    def encode(self, text: str, add_begin: bool = False, add_end: bool = False) -> np.ndarray:
        ids = list(text.encode("utf-8"))
        if add_begin:
            ids.insert(0, BEGIN)
        if add_end:
            ids.append(END)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> str:
        """Décode en ignorant les spéciaux (octets invalides remplacés)."""
        data = bytearray()
        for i in ids:
            i = int(i)
            if i < 0 or i >= VOCAB_SIZE:
                raise TokenRangeError(f"token id {i} outside vocabulary of {VOCAB_SIZE}")
            if i < 256:
                data.append(i)
        return data.decode("utf-8", errors="replace")


def _role_header(role: Role) -> List[int]:
    return [SEP] + list(role.value.encode("utf-8")) + [NEWLINE]


def serialize_messages(
    messages: Sequence[Message],
    add_generation_prompt: bool = False,
) -> SerializedChat:
    """
    Sérialise des messages.

    Args:
        messages: Messages dans l'ordre
        add_generation_prompt: Ajoute l'en-tête assistant final (génération)
    """
    ids: List[int] = [BEGIN]
    mask: List[int] = [0]

    for message in messages:
        header = _role_header(message.role)
        ids.extend(header)
        mask.extend([0] * len(header))

        content = list(message.content.encode("utf-8"))
        is_assistant = message.role == Role.ASSISTANT
        ids.extend(content)
        mask.extend([int(is_assistant)] * len(content))

        if is_assistant:
            ids.append(END)
            mask.append(int(bool(content)))

    if add_generation_prompt:
        header = _role_header(Role.ASSISTANT)
        ids.extend(header)
        mask.extend([0] * len(header))

    return SerializedChat(
        ids=np.asarray(ids, dtype=np.int64),
        loss_mask=np.asarray(mask, dtype=np.int64),
    )


def serialize_conversation(
    conversation: Conversation,
    add_generation_prompt: bool = False,
) -> SerializedChat:
    """Sérialise une conversation (voir le format en tête de module)."""
    return serialize_messages(conversation.messages, add_generation_prompt)


def script_labels_for_tokens(ids: Sequence[int]) -> List[str]:
    """
    Étiquette d'écriture par token.

    Les octets d'un caractère du bloc arabe (U+0600 à U+06FF, octet de tête
    0xD8 à 0xDB) sont "arabic"; lettres et chiffres ASCII "latin"; le reste
    (espaces, ponctuation, spéciaux) "other".
    """
    ids = [int(i) for i in ids]
    labels = [ScriptLabel.OTHER.value] * len(ids)
    i = 0
    while i < len(ids):
        token = ids[i]
        if 0xD8 <= token <= 0xDB and i + 1 < len(ids) and 0x80 <= ids[i + 1] <= 0xBF:
            labels[i] = labels[i + 1] = ScriptLabel.ARABIC.value
            i += 2
            continue
        if token < 128 and chr(token).isalnum():
            labels[i] = ScriptLabel.LATIN.value
        i += 1
    return labels


def encode_sentences(texts: Sequence[str], tokenizer: Optional[ByteTokenizer] = None) -> List[np.ndarray]:
    """Encode des phrases en flux [BEGIN] + octets + [END]."""
    tokenizer = tokenizer or ByteTokenizer()
    return [tokenizer.encode(t, add_begin=True, add_end=True) for t in texts]
