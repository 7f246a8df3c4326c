"""
Gabarits d'instructions de traduction et de translittération.

Les gabarits sont en arabe égyptien, avec les marqueurs:
    [source text], [source language], [target language]

Variantes:
    - single: un échange
    - few_shot: 3 exemples résolus dans le message utilisateur
    - multi_turn: 3 échanges, les suivants via les gabarits courts de continuation
"""

import re
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from btxforge.data.corpus import Language, convert, egyptian_sentences
from btxforge.data.records import Conversation, Message, Role
from btxforge.errors import TemplateError

logger = structlog.get_logger(__name__)

SOURCE_TEXT = "[source text]"
SOURCE_LANGUAGE = "[source language]"
TARGET_LANGUAGE = "[target language]"

N_SHOTS = 3
N_TURNS = 3

_PLACEHOLDER = re.compile(r"\[(source text|source language|target language)\]")


class Task(str, Enum):
    """Tâche d'instruction."""
    TRANSLATE = "translate"
    TRANSLITERATE = "transliterate"


class Variant(str, Enum):
    """Forme de la conversation."""
    SINGLE = "single"
    FEW_SHOT = "few_shot"
    MULTI_TURN = "multi_turn"


TEMPLATES: Dict[Task, Tuple[str, ...]] = {
    Task.TRANSLATE: (
        "ممكن تترجملي من ال[source language] لل[target language]:\n[source text]",
        "ترجملي من ال[source language] لل[target language]:\n[source text]",
        "ترجملي لل[target language]:\n[source text]",
    ),
    Task.TRANSLITERATE: (
        "اكتبلي الكلام ده بال[target language]:\n[source text]",
        "حول من ال[source language] لل[target language]:\n[source text]",
        "ممكن تكتبلي بال[target language]:\n[source text]",
    ),
}

CONTINUATIONS: Dict[Task, str] = {
    Task.TRANSLATE: "ترجم:\n[source text]",
    Task.TRANSLITERATE: "وده كمان:\n[source text]",
}

LANGUAGE_NAMES: Dict[Language, str] = {
    Language.EGYPTIAN: "مصري",
    Language.FRANCO: "فرانكو",
    Language.ENGLISH: "انجليزي",
}

_TRANSLITERATION_PAIRS = {
    (Language.EGYPTIAN, Language.FRANCO),
    (Language.FRANCO, Language.EGYPTIAN),
}


def fill_template(template: str, values: Dict[str, Optional[str]]) -> str:
    """
    Remplace les marqueurs.

    Raises:
        TemplateError: Un marqueur reste non rempli
    """
    text = template
    for placeholder, value in values.items():
        if value is not None:
            text = text.replace(placeholder, value)

    leftover = _PLACEHOLDER.search(text)
    if leftover:
        raise TemplateError(f"unfilled placeholder {leftover.group(0)}")
    return text


def _check_direction(task: Task, src: Language, tgt: Language) -> None:
    if src == tgt:
        raise TemplateError(f"source and target language are both {src.value}")
    if task == Task.TRANSLITERATE and (src, tgt) not in _TRANSLITERATION_PAIRS:
        raise TemplateError(f"transliteration from {src.value} to {tgt.value} is not supported")
    if task == Task.TRANSLATE and Language.ENGLISH not in (src, tgt):
        raise TemplateError(f"translation from {src.value} to {tgt.value} is not supported")


def _extra_sources(rng: np.random.Generator, lang: Language, n: int) -> List[str]:
    seed = int(rng.integers(0, 2**31 - 1))
    sentences = egyptian_sentences(n, seed)
    if lang == Language.EGYPTIAN:
        return sentences
    return [convert(s, Language.EGYPTIAN, lang) for s in sentences]


def instantiate_template(
    task: Task,
    source_text: str,
    src_lang: Optional[Language],
    tgt_lang: Optional[Language],
    variant: Variant = Variant.SINGLE,
    seed: int = 0,
) -> Conversation:
    """
    Construit une conversation d'instruction.

    Args:
        task: translate ou transliterate
        source_text: Texte source (non vide)
        src_lang: Langue source
        tgt_lang: Langue cible
        variant: single, few_shot ou multi_turn
        seed: Graine (choix du gabarit, exemples additionnels)

    Returns:
        Conversation user/assistant; la variante single porte la paire src/tgt

    Raises:
        TemplateError: Texte vide, marqueur non rempli ou direction non supportée
    """
    task, variant = Task(task), Variant(variant)
    if not source_text.strip():
        raise TemplateError("empty source text")

    rng = np.random.default_rng(seed)
    template = TEMPLATES[task][int(rng.integers(len(TEMPLATES[task])))]

    values = {
        SOURCE_TEXT: source_text,
        SOURCE_LANGUAGE: LANGUAGE_NAMES[Language(src_lang)] if src_lang is not None else None,
        TARGET_LANGUAGE: LANGUAGE_NAMES[Language(tgt_lang)] if tgt_lang is not None else None,
    }
    prompt = fill_template(template, values)

    if src_lang is None or tgt_lang is None:
        raise TemplateError("source and target languages are required")
    src, tgt = Language(src_lang), Language(tgt_lang)
    _check_direction(task, src, tgt)
    target = convert(source_text, src, tgt)

    if variant == Variant.SINGLE:
        return Conversation(
            messages=[
                Message(role=Role.USER, content=prompt),
                Message(role=Role.ASSISTANT, content=target),
            ],
            src=source_text,
            tgt=target,
            src_lang=src.value,
            tgt_lang=tgt.value,
        )

    if variant == Variant.FEW_SHOT:
        shots = []
        for example in _extra_sources(rng, src, N_SHOTS):
            shot = fill_template(template, {**values, SOURCE_TEXT: example})
            shots.append(f"{shot}\n{convert(example, src, tgt)}")
        return Conversation(messages=[
            Message(role=Role.USER, content="\n\n".join(shots + [prompt])),
            Message(role=Role.ASSISTANT, content=target),
        ])

    messages = [
        Message(role=Role.USER, content=prompt),
        Message(role=Role.ASSISTANT, content=target),
    ]
    for follow_up in _extra_sources(rng, src, N_TURNS - 1):
        messages.append(Message(
            role=Role.USER,
            content=fill_template(CONTINUATIONS[task], {SOURCE_TEXT: follow_up}),
        ))
        messages.append(Message(role=Role.ASSISTANT, content=convert(follow_up, src, tgt)))
    return Conversation(messages=messages)


VARIANT_WEIGHTS = ((Variant.SINGLE, 0.7), (Variant.FEW_SHOT, 0.15), (Variant.MULTI_TURN, 0.15))


def generate_instructions(
    n: int,
    seed: int,
    english_fraction: float = 0.1,
    noise_level: float = 0.0,
) -> List[Conversation]:
    """
    Jeu d'instructions synthétique.

    Une part english_fraction est de la traduction égyptien ↔ anglais; le
    reste est de la translittération égyptien ↔ franco dans les deux sens.

    Args:
        n: Nombre de conversations
        seed: Graine
        english_fraction: Part des instructions impliquant l'anglais
        noise_level: Bruit des phrases sources

    Returns:
        Conversations identifiées "sft-00000", ...
    """
    rng = np.random.default_rng([seed, 5])
    sentences = egyptian_sentences(n, seed, noise_level)
    n_english = int(round(english_fraction * n))
    english = set(rng.permutation(n)[:n_english].tolist())
    variants = [v for v, _ in VARIANT_WEIGHTS]
    weights = [w for _, w in VARIANT_WEIGHTS]

    conversations = []
    for i, sentence in enumerate(sentences):
        forward = bool(rng.random() < 0.5)
        if i in english:
            task = Task.TRANSLATE
            src, tgt = (Language.EGYPTIAN, Language.ENGLISH) if forward else (Language.ENGLISH, Language.EGYPTIAN)
        else:
            task = Task.TRANSLITERATE
            src, tgt = (Language.EGYPTIAN, Language.FRANCO) if forward else (Language.FRANCO, Language.EGYPTIAN)
        variant = variants[int(rng.choice(len(variants), p=weights))]
        source = sentence if src == Language.EGYPTIAN else convert(sentence, Language.EGYPTIAN, src)
        conversation = instantiate_template(task, source, src, tgt, variant, seed=int(rng.integers(2**31 - 1)))
        conversations.append(conversation.model_copy(update={
            "id": f"sft-{i:05d}",
            "category": task.value,
        }))

    logger.info("instructions_generated", count=n, english=n_english, seed=seed)
    return conversations
