"""
Générateurs de corpus synthétiques à double écriture.

Les phrases sont tirées d'une chaîne de Markov d'ordre 2 sur le lexique livré
(~230 mots égyptiens). La chaîne est fixe (graine de chaîne constante); la
graine du corpus ne choisit que les trajectoires, le bruit et l'allocation
des phrases en écriture latine, qui est exacte: round(latin_ratio · n).
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, Field

from btxforge.data.corrector import KEEP_IN_LATIN
from btxforge.data.records import Conversation, Message, ParallelRecord, Role, SentenceRecord
from btxforge.data.script import ScriptLabel
from btxforge.data.transliteration import TransliterationTable, default_table
from btxforge.errors import TemplateError, TransliterationTableError

logger = structlog.get_logger(__name__)

CHAIN_SEED = 20250
CHAIN_BRANCHING = 4
MIN_WORDS = 6
MAX_WORDS = 12

CHAT_CATEGORIES = ("general", "daily", "tech", "code", "math", "safety")
SWITCH_RATES = (0.0, 0.1, 0.2, 0.3, 0.5)


class Language(str, Enum):
    """Variétés de langue du corpus parallèle."""
    EGYPTIAN = "egyptian"  # écriture arabe
    FRANCO = "franco"  # écriture latine (Arabizi)
    ENGLISH = "english"


class CorpusDomain(str, Enum):
    """Domaine du corpus."""
    BRANCH_ARABIC = "branch_arabic"
    BRANCH_LATIN = "branch_latin"
    BASE = "base_domain"


_DOMAIN_STREAM = {
    CorpusDomain.BRANCH_ARABIC: 1,
    CorpusDomain.BRANCH_LATIN: 2,
    CorpusDomain.BASE: 3,
}


# ============================================================================
# Lexique
# ============================================================================

@dataclass(frozen=True)
class LexiconEntry:
    arabic: str
    gloss: str


class Lexicon:
    """
    Lexique du générateur avec gloses anglaises.

    La table de translittération doit être bijective sur le lexique:
    vérifié à la construction.
    """

    def __init__(self, entries: Sequence[LexiconEntry], table: Optional[TransliterationTable] = None):
        self.entries: Tuple[LexiconEntry, ...] = tuple(entries)
        self.table = table or default_table()

        self.words: List[str] = [e.arabic for e in self.entries]
        self.glosses: List[str] = [e.gloss for e in self.entries]
        if len(set(self.words)) != len(self.words) or len(set(self.glosses)) != len(self.glosses):
            raise TransliterationTableError("lexicon contains duplicate words or glosses")

        broken = [w for w in self.words if self.table.to_arabic(self.table.to_latin(w)) != w]
        if broken:
            raise TransliterationTableError(
                f"table is not bijective on lexicon words: {', '.join(broken[:5])}"
            )

        self._to_gloss: Dict[str, str] = {e.arabic: e.gloss for e in self.entries}
        self._from_gloss: Dict[str, str] = {e.gloss: e.arabic for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def gloss(self, text: str) -> str:
        """Traduction mot à mot arabe → anglais (mots inconnus conservés)."""
        return " ".join(self._to_gloss.get(w, w) for w in text.split())

    def ungloss(self, text: str) -> str:
        """Traduction mot à mot anglais → arabe."""
        return " ".join(self._from_gloss.get(w, w) for w in text.split())

    @classmethod
    def from_lines(cls, lines: Sequence[str], table: Optional[TransliterationTable] = None) -> "Lexicon":
        entries = []
        for raw in lines:
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            arabic, gloss = line.split("\t")
            entries.append(LexiconEntry(arabic=arabic.strip(), gloss=gloss.strip()))
        return cls(entries, table)


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    """Lexique livré (data/resources/lexicon.tsv)."""
    text = (resources.files("btxforge") / "data" / "resources" / "lexicon.tsv").read_text(
        encoding="utf-8"
    )
    return Lexicon.from_lines(text.splitlines())


# ============================================================================
# Chaîne de Markov
# ============================================================================

class MarkovChain:
    """
    Chaîne d'ordre 2 sur des indices de mots.

    Les successeurs d'un état (a, b) sont dérivés de la graine de chaîne et
    de l'état lui-même; aucune table V² n'est matérialisée.
    """

    def __init__(self, vocab_size: int, chain_seed: int = CHAIN_SEED, branching: int = CHAIN_BRANCHING):
        self.vocab_size = vocab_size
        self.chain_seed = chain_seed
        self.branching = min(branching, vocab_size)
        self._cache: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}

    def successors(self, a: int, b: int) -> Tuple[np.ndarray, np.ndarray]:
        key = (a, b)
        if key not in self._cache:
            rng = np.random.default_rng([self.chain_seed, a, b])
            ids = rng.choice(self.vocab_size, size=self.branching, replace=False)
            probs = rng.dirichlet(np.ones(self.branching))
            self._cache[key] = (ids, probs)
        return self._cache[key]

    def sample(self, rng: np.random.Generator, length: int) -> List[int]:
        start = self.vocab_size  # état initial hors vocabulaire
        a, b = start, start
        out: List[int] = []
        for _ in range(length):
            ids, probs = self.successors(a, b)
            nxt = int(ids[rng.choice(len(ids), p=probs)])
            out.append(nxt)
            a, b = b, nxt
        return out


@lru_cache(maxsize=4)
def _chain(vocab_size: int, chain_seed: int) -> MarkovChain:
    return MarkovChain(vocab_size, chain_seed)


# ============================================================================
# Corpus
# ============================================================================

class CorpusSpec(BaseModel):
    """Paramètres d'un corpus synthétique."""

    n_sentences: int = Field(ge=1)
    latin_ratio: float = Field(default=0.25, ge=0.0, le=1.0)
    noise_level: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int
    domain: CorpusDomain = CorpusDomain.BRANCH_ARABIC
    chain_seed: int = CHAIN_SEED


@dataclass(frozen=True)
class TaggedSentence:
    """Phrase avec son étiquette d'écriture."""
    text: str
    script: ScriptLabel
    domain: CorpusDomain

    def to_record(self) -> SentenceRecord:
        return SentenceRecord(text=self.text, script=self.script.value, domain=self.domain.value)

    @classmethod
    def from_record(cls, record: SentenceRecord) -> "TaggedSentence":
        return cls(
            text=record.text,
            script=ScriptLabel(record.script),
            domain=CorpusDomain(record.domain),
        )


def _sample_word_ids(
    rng: np.random.Generator,
    chain: MarkovChain,
    noise_level: float,
) -> List[int]:
    length = int(rng.integers(MIN_WORDS, MAX_WORDS + 1))
    ids = chain.sample(rng, length)
    noise = rng.random(length)
    replacements = rng.integers(0, chain.vocab_size, size=length)
    return [int(r) if u < noise_level else i for i, u, r in zip(ids, noise, replacements)]


def generate_corpus(
    spec: CorpusSpec,
    table: Optional[TransliterationTable] = None,
    lexicon: Optional[Lexicon] = None,
) -> List[TaggedSentence]:
    """
    Génère un corpus étiqueté par écriture.

    Le domaine base_domain utilise les gloses anglaises (lexique ASCII
    disjoint): toutes ses phrases sont latines et latin_ratio est ignoré.

    Args:
        spec: Paramètres du corpus
        table: Table de translittération
        lexicon: Lexique du générateur

    Returns:
        Phrases étiquetées, déterministes pour une graine
    """
    table = table or default_table()
    lexicon = lexicon or default_lexicon()
    chain = _chain(len(lexicon), spec.chain_seed)
    rng = np.random.default_rng([spec.seed, _DOMAIN_STREAM[spec.domain]])

    n = spec.n_sentences
    n_latin = int(round(spec.latin_ratio * n))
    latin_indices = set(rng.permutation(n)[:n_latin].tolist())

    sentences: List[TaggedSentence] = []
    for i in range(n):
        ids = _sample_word_ids(rng, chain, spec.noise_level)
        if spec.domain == CorpusDomain.BASE:
            text = " ".join(lexicon.glosses[j] for j in ids)
            sentences.append(TaggedSentence(text, ScriptLabel.LATIN, spec.domain))
            continue

        arabic = " ".join(lexicon.words[j] for j in ids)
        if i in latin_indices:
            sentences.append(TaggedSentence(table.to_latin(arabic), ScriptLabel.LATIN, spec.domain))
        else:
            sentences.append(TaggedSentence(arabic, ScriptLabel.ARABIC, spec.domain))

    logger.info(
        "corpus_generated",
        domain=spec.domain.value,
        sentences=n,
        latin=sum(1 for s in sentences if s.script == ScriptLabel.LATIN),
        seed=spec.seed,
    )
    return sentences


# ============================================================================
# Corpus parallèle
# ============================================================================

def convert(
    text: str,
    src_lang: Language,
    tgt_lang: Language,
    table: Optional[TransliterationTable] = None,
    lexicon: Optional[Lexicon] = None,
) -> str:
    """
    Convertit un texte entre variétés via l'égyptien en écriture arabe.

    translittération: egyptian ↔ franco; traduction: glose mot à mot ↔ english
    """
    table = table or default_table()
    lexicon = lexicon or default_lexicon()
    src_lang, tgt_lang = Language(src_lang), Language(tgt_lang)
    if src_lang == tgt_lang:
        raise TemplateError(f"source and target language are both {src_lang.value}")

    if src_lang == Language.FRANCO:
        pivot = table.to_arabic(text)
    elif src_lang == Language.ENGLISH:
        pivot = lexicon.ungloss(text)
    else:
        pivot = text

    if tgt_lang == Language.FRANCO:
        return table.to_latin(pivot)
    if tgt_lang == Language.ENGLISH:
        return lexicon.gloss(pivot)
    return pivot


def egyptian_sentences(n: int, seed: int, noise_level: float = 0.0) -> List[str]:
    """Phrases égyptiennes en écriture arabe (pivot des corpus parallèles)."""
    spec = CorpusSpec(
        n_sentences=n, latin_ratio=0.0, noise_level=noise_level, seed=seed,
        domain=CorpusDomain.BRANCH_ARABIC,
    )
    return [s.text for s in generate_corpus(spec)]


def _render(sentence: str, lang: Language) -> str:
    return sentence if lang == Language.EGYPTIAN else convert(sentence, Language.EGYPTIAN, lang)


def generate_parallel(
    n: int,
    src_lang: Language,
    tgt_lang: Language,
    seed: int,
    noise_level: float = 0.0,
) -> List[ParallelRecord]:
    """Paires source/cible synthétiques."""
    src_lang, tgt_lang = Language(src_lang), Language(tgt_lang)
    if src_lang == tgt_lang:
        raise TemplateError(f"source and target language are both {src_lang.value}")
    return [
        ParallelRecord(
            src=_render(sentence, src_lang),
            tgt=_render(sentence, tgt_lang),
            src_lang=src_lang.value,
            tgt_lang=tgt_lang.value,
        )
        for sentence in egyptian_sentences(n, seed, noise_level)
    ]


# ============================================================================
# Conversations avec code-switching
# ============================================================================

def _switch_words(ids, rate: float, rng: np.random.Generator, lexicon: Lexicon,
                  table: TransliterationTable) -> str:
    words = []
    for j in ids:
        word = lexicon.words[j]
        if rng.random() < rate:
            word = KEEP_IN_LATIN[int(rng.integers(len(KEEP_IN_LATIN)))] if rng.random() < 0.3 \
                else table.to_latin(word)
        words.append(word)
    return " ".join(words)


def generate_code_switched_chats(
    n: int,
    seed: int,
    table: Optional[TransliterationTable] = None,
    lexicon: Optional[Lexicon] = None,
) -> List[Conversation]:
    """
    Conversations en écriture arabe avec des mots latins dans la consigne et la réponse.

    Chaque conversation reçoit un taux de bascule tiré dans SWITCH_RATES,
    appliqué aux deux messages; un mot basculé devient sa forme Arabizi, ou
    un terme technique conservé en latin. La sélection hors politique filtre
    sur la consigne et corrige la réponse.
    """
    table = table or default_table()
    lexicon = lexicon or default_lexicon()
    chain = _chain(len(lexicon), CHAIN_SEED)
    rng = np.random.default_rng([seed, 4])

    chats = []
    for i in range(n):
        question_ids = _sample_word_ids(rng, chain, 0.0)
        answer_ids = _sample_word_ids(rng, chain, 0.0)
        rate = float(rng.choice(SWITCH_RATES))
        category = str(rng.choice(CHAT_CATEGORIES))
        question = _switch_words(question_ids, rate, rng, lexicon, table)
        answer = _switch_words(answer_ids, rate, rng, lexicon, table)

        chats.append(Conversation(
            id=f"chat-{i:05d}",
            category=category,
            messages=[
                Message(role=Role.USER, content=question),
                Message(role=Role.ASSISTANT, content=answer),
            ],
        ))
    return chats
