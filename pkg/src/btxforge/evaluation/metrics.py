"""
BLEU et chrF au niveau du corpus.

BLEU: tokens séparés par espaces, n-grammes 1..4, précisions modifiées
agrégées sur le corpus, moyenne géométrique sur les ordres effectifs
(ordres sans n-gramme candidat exclus), lissage additif ε = 1e-9 pour les
correspondances nulles, pénalité de brièveté exp(1 - r/c) si c < r.

chrF: n-grammes de caractères 1..6 sans espaces, comptes agrégés sur le
corpus, précision et rappel moyennés sur les ordres effectifs, F-β avec
β = 2, échelle 0..100.
"""

from collections import Counter
from typing import List, Sequence, Tuple

import numpy as np

from btxforge.errors import MetricInputError

BLEU_MAX_ORDER = 4
BLEU_EPSILON = 1e-9
CHRF_MAX_ORDER = 6
CHRF_BETA = 2.0


def _check_pairs(candidates: Sequence[str], references: Sequence[str]) -> None:
    if len(candidates) != len(references):
        raise MetricInputError(
            f"{len(candidates)} candidates for {len(references)} references"
        )
    if not candidates:
        raise MetricInputError("at least one candidate/reference pair is required")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(
    candidates: Sequence[str],
    references: Sequence[str],
    max_order: int = BLEU_MAX_ORDER,
) -> Tuple[List[int], List[int], int, int]:
    """
    Statistiques suffisantes du BLEU corpus.

    Returns:
        (correspondances par ordre, n-grammes candidats par ordre,
         longueur candidate, longueur de référence)
    """
    _check_pairs(candidates, references)
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = ref_len = 0
    for candidate, reference in zip(candidates, references):
        cand_tokens, ref_tokens = candidate.split(), reference.split()
        if not ref_tokens:
            raise MetricInputError("empty reference")
        cand_len += len(cand_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, max_order + 1):
            cand_counts = _ngrams(cand_tokens, n)
            ref_counts = _ngrams(ref_tokens, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            totals[n - 1] += sum(cand_counts.values())
    return matches, totals, cand_len, ref_len


def bleu(candidates: Sequence[str], references: Sequence[str]) -> float:
    """
    BLEU corpus dans [0, 1].

    Raises:
        MetricInputError: Nombres différents, liste vide ou référence vide
    """
    matches, totals, cand_len, ref_len = bleu_statistics(candidates, references)
    if cand_len == 0:
        return 0.0

    log_precisions = [
        np.log(max(m, BLEU_EPSILON) / t) for m, t in zip(matches, totals) if t > 0
    ]
    brevity = 1.0 if cand_len >= ref_len else float(np.exp(1.0 - ref_len / cand_len))
    score = brevity * float(np.exp(np.mean(log_precisions)))
    return min(max(score, 0.0), 1.0)


def _char_ngrams(text: str, n: int) -> Counter:
    chars = "".join(text.split())
    return Counter(chars[i:i + n] for i in range(len(chars) - n + 1))


def chrf(candidates: Sequence[str], references: Sequence[str]) -> float:
    """
    chrF corpus dans [0, 100].

    Raises:
        MetricInputError: Nombres différents ou liste vide
    """
    _check_pairs(candidates, references)
    matches = np.zeros(CHRF_MAX_ORDER)
    cand_totals = np.zeros(CHRF_MAX_ORDER)
    ref_totals = np.zeros(CHRF_MAX_ORDER)
    for candidate, reference in zip(candidates, references):
        for n in range(1, CHRF_MAX_ORDER + 1):
            cand_counts = _char_ngrams(candidate, n)
            ref_counts = _char_ngrams(reference, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            cand_totals[n - 1] += sum(cand_counts.values())
            ref_totals[n - 1] += sum(ref_counts.values())

    effective = [n for n in range(CHRF_MAX_ORDER) if cand_totals[n] > 0 and ref_totals[n] > 0]
    if not effective:
        return 0.0

    precision = float(np.mean([matches[n] / cand_totals[n] for n in effective]))
    recall = float(np.mean([matches[n] / ref_totals[n] for n in effective]))
    if precision + recall == 0.0:
        return 0.0
    beta2 = CHRF_BETA ** 2
    score = (1.0 + beta2) * precision * recall / (beta2 * precision + recall)
    return 100.0 * min(max(score, 0.0), 1.0)
