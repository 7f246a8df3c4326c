"""
Translittération arabe ↔ Arabizi (écriture latine avec chiffres).

Réécriture gloutonne "plus longue correspondance d'abord" dans les deux sens.
Les règles marquées `$` ne s'appliquent qu'en fin de mot (caractère suivant
non alphanumérique ou fin du texte). Les caractères absents de la table
passent inchangés.

Exemple:
    "حاجة جامدة" → "7aga gameda"
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import structlog

from btxforge.errors import TransliterationTableError

logger = structlog.get_logger(__name__)

WORD_FINAL = "$"


class Direction(str, Enum):
    """Sens de translittération."""
    TO_LATIN = "to_latin"
    TO_ARABIC = "to_arabic"


@dataclass(frozen=True)
class Rule:
    """Règle de réécriture arabe ↔ latin."""
    arabic: str
    latin: str
    word_final: bool = False


def _at_word_end(text: str, index: int) -> bool:
    return index >= len(text) or not text[index].isalnum()


class TransliterationTable:
    """
    Table de règles ordonnée, validée à la construction.

    Validation:
        - côtés non vides, pas de doublon (par sens et par ancrage)
        - chaque règle fait l'aller-retour isolément
    """

    def __init__(self, rules: Sequence[Rule]):
        if not rules:
            raise TransliterationTableError("empty transliteration table")

        self.rules: Tuple[Rule, ...] = tuple(rules)
        self._to_latin = self._ordered([(r.arabic, r.latin, r.word_final) for r in self.rules])
        self._to_arabic = self._ordered([(r.latin, r.arabic, r.word_final) for r in self.rules])
        self._validate()

        logger.debug("transliteration_table_initialized", rules=len(self.rules))

    @staticmethod
    def _ordered(entries: List[Tuple[str, str, bool]]) -> List[Tuple[str, str, bool]]:
        """Plus longues sources d'abord; à longueur égale, règles de fin de mot d'abord."""
        return sorted(entries, key=lambda e: (-len(e[0]), not e[2]))

    def _validate(self) -> None:
        seen: Dict[Tuple[str, str, bool], Rule] = {}
        for rule in self.rules:
            if not rule.arabic or not rule.latin:
                raise TransliterationTableError(f"empty side in rule {rule}")
            for side, value in (("arabic", rule.arabic), ("latin", rule.latin)):
                key = (side, value, rule.word_final)
                if key in seen:
                    raise TransliterationTableError(
                        f"duplicate {side} side '{value}' in rules {seen[key]} and {rule}"
                    )
                seen[key] = rule

        anchor = self._anchor()
        for rule in self.rules:
            probe = rule.arabic if rule.word_final else rule.arabic + anchor.arabic
            back = self.to_arabic(self.to_latin(probe))
            if back != probe:
                raise TransliterationTableError(
                    f"rule {rule.arabic}->{rule.latin} does not round-trip "
                    f"('{probe}' -> '{back}')"
                )

    def _anchor(self) -> Rule:
        """Règle neutre servant de contexte non final pour tester les règles générales."""
        for rule in self.rules:
            if rule.word_final or len(rule.latin) != 1:
                continue
            if sum(1 for r in self.rules if r.latin.startswith(rule.latin)) == 1:
                return rule
        raise TransliterationTableError(
            "table needs one single-character rule that prefixes no other rule"
        )

    # ------------------------------------------------------------------

    @staticmethod
    def _rewrite(text: str, entries: List[Tuple[str, str, bool]]) -> str:
        out: List[str] = []
        i = 0
        while i < len(text):
            for source, target, word_final in entries:
                if not text.startswith(source, i):
                    continue
                if word_final and not _at_word_end(text, i + len(source)):
                    continue
                out.append(target)
                i += len(source)
                break
            else:
                out.append(text[i])
                i += 1
        return "".join(out)

    def to_latin(self, text: str) -> str:
        return self._rewrite(text, self._to_latin)

    def to_arabic(self, text: str) -> str:
        return self._rewrite(text, self._to_arabic)

    # ------------------------------------------------------------------

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "TransliterationTable":
        """Analyse le format "arabe<TAB>latin" (# = commentaire)."""
        rules = []
        for line_no, raw in enumerate(lines, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TransliterationTableError(f"line {line_no}: expected 'arabic<TAB>latin'")
            arabic, latin = parts[0].strip(), parts[1].strip()
            final_a, final_l = arabic.endswith(WORD_FINAL), latin.endswith(WORD_FINAL)
            if final_a != final_l:
                raise TransliterationTableError(
                    f"line {line_no}: word-final marker must appear on both sides"
                )
            rules.append(Rule(
                arabic=arabic.rstrip(WORD_FINAL),
                latin=latin.rstrip(WORD_FINAL),
                word_final=final_a,
            ))
        return cls(rules)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TransliterationTable":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_lines(f.readlines())


@lru_cache(maxsize=1)
def default_table() -> TransliterationTable:
    """Table livrée avec le package (data/resources/arabizi.tsv)."""
    text = (resources.files("btxforge") / "data" / "resources" / "arabizi.tsv").read_text(
        encoding="utf-8"
    )
    return TransliterationTable.from_lines(text.splitlines())


def transliterate(
    text: str,
    direction: Union[Direction, str],
    table: Optional[TransliterationTable] = None,
) -> str:
    """
    Translittère un texte.

    Args:
        text: Texte source
        direction: to_latin ou to_arabic
        table: Table validée (table livrée par défaut)

    Returns:
        Texte réécrit
    """
    table = table or default_table()
    if Direction(direction) == Direction.TO_LATIN:
        return table.to_latin(text)
    return table.to_arabic(text)
