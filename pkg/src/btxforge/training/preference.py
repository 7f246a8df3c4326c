"""
Construction des paires de préférence et exactitude de préférence.

Deux stratégies combinées:
    - on_policy: la réponse de référence est préférée, la réponse rejetée
      est échantillonnée par la politique (température 1 par défaut)
    - off_policy: consignes en écriture arabe contenant quelques mots latins
      (au moins un, moins de 35 %); la réponse corrigée est préférée
"""

from enum import Enum
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import structlog

from btxforge.core.tensor import no_grad
from btxforge.core.tokenizer import ByteTokenizer, serialize_messages
from btxforge.core.transformer import Checkpoint, TransformerModel, generate
from btxforge.data.corrector import KEEP_IN_LATIN, synth_corrector
from btxforge.data.records import Conversation, Message, PreferencePair, Role
from btxforge.data.script import latin_word_share
from btxforge.data.transliteration import TransliterationTable
from btxforge.errors import EmptyCandidateSetError, MetricInputError
from btxforge.training.losses import dpo_terms
from btxforge.utils.config import DpoConfig

logger = structlog.get_logger(__name__)

MAX_LATIN_SHARE = 0.35
EXCLUDED_CATEGORIES = ("code", "math", "safety")


class PairMode(str, Enum):
    """Stratégie de construction des paires."""
    ON_POLICY = "on_policy"
    OFF_POLICY = "off_policy"


def _split_last_turn(conversation: Conversation):
    """(messages avant la dernière réponse, dernière réponse) ou None."""
    index = conversation.last_assistant_index()
    if index is None or index == 0:
        return None
    prompt = conversation.messages[:index]
    if prompt[-1].role != Role.USER:
        return None
    return prompt, conversation.messages[index].content


def is_off_policy_candidate(conversation: Conversation) -> bool:
    """
    Filtre de code-switching sur la consigne.

    Catégorie hors code/math/safety; les messages utilisateur qui précèdent
    la dernière réponse ont au moins un mot latin et moins de 35 % de mots latins.
    """
    if conversation.category in EXCLUDED_CATEGORIES:
        return False
    split = _split_last_turn(conversation)
    if split is None:
        return False
    prompt, _ = split
    n_latin, n_words = latin_word_share(" ".join(m.content for m in prompt if m.role == Role.USER))
    return n_latin >= 1 and n_latin / n_words < MAX_LATIN_SHARE


def _make_pair(prompt, chosen: str, rejected: str, pair_id: Optional[str]) -> Optional[PreferencePair]:
    if not chosen or not rejected or chosen == rejected:
        return None
    return PreferencePair(prompt=list(prompt), chosen=chosen, rejected=rejected, id=pair_id)


def _on_policy_pairs(
    records: Sequence[Conversation],
    policy: TransformerModel,
    seed: int,
    dpo: DpoConfig,
) -> List[PreferencePair]:
    eligible = [(i, split) for i, r in enumerate(records) if (split := _split_last_turn(r)) is not None]
    rng = np.random.default_rng(seed)
    n_pick = min(len(eligible), max(1, int(round(dpo.on_policy_fraction * len(eligible))))) if eligible else 0
    picked = sorted(rng.choice(len(eligible), size=n_pick, replace=False).tolist()) if n_pick else []

    tokenizer = ByteTokenizer()
    pairs: List[PreferencePair] = []
    for position in picked:
        index, (prompt, chosen) = eligible[position]
        context = serialize_messages(prompt, add_generation_prompt=True).ids
        if len(context) >= policy.config.max_context:
            logger.debug("pair_skipped_context", index=index, length=len(context))
            continue
        sample = generate(
            policy,
            context,
            max_new=dpo.max_new_tokens,
            mode="sample",
            temperature=dpo.temperature,
            seed=seed + index,
        )
        pair = _make_pair(prompt, chosen, tokenizer.decode(sample), records[index].id)
        if pair is None:
            logger.debug("pair_dropped", index=index, reason="rejected equals chosen or is empty")
            continue
        # le décodage peut élargir les octets invalides (U+FFFD)
        rejected = serialize_messages(list(prompt) + [Message(role=Role.ASSISTANT, content=pair.rejected)]).ids
        if len(rejected) > policy.config.max_context + 1:
            logger.debug("pair_skipped_context", index=index, length=len(rejected))
            continue
        pairs.append(pair)
    return pairs


def _off_policy_pairs(
    records: Sequence[Conversation],
    table: Optional[TransliterationTable],
    allowlist: Iterable[str],
) -> List[PreferencePair]:
    pairs: List[PreferencePair] = []
    for record in records:
        split = _split_last_turn(record)
        if split is None or not is_off_policy_candidate(record):
            continue
        prompt, original = split
        corrected = synth_corrector(record, table, allowlist)
        pair = _make_pair(prompt, corrected.messages[len(prompt)].content, original, record.id)
        if pair is not None:
            pairs.append(pair)
    return pairs


def build_preference_pairs(
    records: Sequence[Conversation],
    policy: Optional[Union[TransformerModel, Checkpoint]],
    mode: Union[PairMode, str],
    seed: int,
    dpo: Optional[DpoConfig] = None,
    table: Optional[TransliterationTable] = None,
    allowlist: Iterable[str] = KEEP_IN_LATIN,
) -> List[PreferencePair]:
    """
    Construit des paires de préférence.

    Args:
        records: Conversations source (SFT ou chats avec code-switching)
        policy: Modèle politique (requis en on_policy)
        mode: on_policy ou off_policy
        seed: Graine (sélection et échantillonnage)
        dpo: Fraction, température et longueur d'échantillonnage
        table: Table de translittération du correcteur
        allowlist: Termes techniques gardés en latin

    Returns:
        Paires déterministes pour une graine

    Raises:
        EmptyCandidateSetError: Aucune paire après filtrage
    """
    mode = PairMode(mode)
    dpo = dpo or DpoConfig()

    if mode == PairMode.ON_POLICY:
        if policy is None:
            raise ValueError("on_policy pairs need a policy model")
        model = policy if isinstance(policy, TransformerModel) else TransformerModel(policy, trainable=False)
        pairs = _on_policy_pairs(records, model, seed, dpo)
    else:
        pairs = _off_policy_pairs(records, table, allowlist)

    if not pairs:
        raise EmptyCandidateSetError(f"no {mode.value} preference pair survived filtering")
    logger.info("preference_pairs_built", mode=mode.value, pairs=len(pairs), records=len(records))
    return pairs


def preference_accuracy(
    policy: TransformerModel,
    reference: TransformerModel,
    pairs: Sequence[PreferencePair],
    beta: float,
) -> float:
    """
    Part des paires dont la marge de récompense implicite est positive.

    Raises:
        MetricInputError: Aucune paire
    """
    if not pairs:
        raise MetricInputError("preference accuracy needs at least one pair")
    with no_grad():
        wins = sum(1 for pair in pairs if dpo_terms(policy, reference, pair, beta).margin > 0)
    return wins / len(pairs)
