"""
Classification d'écriture (arabe / latine).

Règle transparente à seuils sur la fraction de caractères du bloc arabe:
    fraction = arabes / (arabes + lettres latines de base + chiffres)
    - ARABIC si fraction >= 0.9
    - LATIN si fraction <= 0.1
    - MIXED sinon
    - OTHER si aucune lettre ni chiffre
"""

from dataclasses import dataclass
from enum import Enum
from typing import Tuple

ARABIC_THRESHOLD = 0.9
LATIN_THRESHOLD = 0.1


class ScriptLabel(str, Enum):
    """Étiquette d'écriture."""
    ARABIC = "arabic"
    LATIN = "latin"
    MIXED = "mixed"
    OTHER = "other"


@dataclass(frozen=True)
class Script:
    """Résultat de classification."""
    label: ScriptLabel
    arabic_fraction: float

    @property
    def is_arabic(self) -> bool:
        return self.label == ScriptLabel.ARABIC

    @property
    def is_latin(self) -> bool:
        return self.label == ScriptLabel.LATIN


def is_arabic_char(ch: str) -> bool:
    """Caractère du bloc Unicode arabe (U+0600 à U+06FF)."""
    return "\u0600" <= ch <= "\u06ff"


def is_latin_char(ch: str) -> bool:
    """Lettre latine de base ou chiffre ASCII."""
    return ch.isascii() and ch.isalnum()


def classify_script(text: str) -> Script:
    """
    Classifie l'écriture d'un texte.

    Args:
        text: Texte quelconque

    Returns:
        Étiquette et fraction arabe
    """
    n_arabic = sum(1 for ch in text if is_arabic_char(ch))
    n_latin = sum(1 for ch in text if is_latin_char(ch))
    total = n_arabic + n_latin

    if total == 0:
        return Script(label=ScriptLabel.OTHER, arabic_fraction=0.0)

    fraction = n_arabic / total
    if fraction >= ARABIC_THRESHOLD:
        label = ScriptLabel.ARABIC
    elif fraction <= LATIN_THRESHOLD:
        label = ScriptLabel.LATIN
    else:
        label = ScriptLabel.MIXED
    return Script(label=label, arabic_fraction=fraction)


def latin_word_share(text: str) -> Tuple[int, int]:
    """
    Compte les mots (séparés par des blancs) en écriture latine.

    Returns:
        (mots latins, mots au total)
    """
    words = text.split()
    n_latin = sum(1 for w in words if classify_script(w).label == ScriptLabel.LATIN)
    return n_latin, len(words)
