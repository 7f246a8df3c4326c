"""
Tests unitaires pour les métriques, le harnais de benchmark et l'analyse du routage.
"""

import json
import math

import numpy as np
import pytest
from pydantic import ValidationError

from btxforge.core.moe import RoutingTrace, TokenRoute
from btxforge.core.transformer import TransformerModel
from btxforge.errors import EmptyTraceError, MetricInputError
from btxforge.evaluation.harness import (
    BenchmarkSuite,
    GenerationTask,
    McTask,
    ScoreMode,
    TaskSpec,
    TaskType,
    build_synthetic_suite,
    load_suite,
    mc_score,
    pick_choice,
    run_benchmark,
    save_suite,
)
from btxforge.evaluation.metrics import bleu, bleu_statistics, chrf
from btxforge.evaluation.report import MetricReport
from btxforge.evaluation.routing import RoutingStats, routing_stats, specialization_score


@pytest.fixture
def uniform_model(tiny_checkpoint):
    """Tête de sortie nulle: distribution uniforme sur le vocabulaire."""
    ckpt = tiny_checkpoint.astype(np.float64)
    ckpt.tensors["head.out"][:] = 0.0
    return TransformerModel(ckpt, trainable=False)


WORDS = ["ana", "ray7", "el", "shoghl", "delwa2ty", "حاجة", "جامدة", "3ala", "tool", "كويس", "ya", "sa7by"]


def _pairs(n: int = 20, seed: int = 11):
    """Paires candidat/référence tirées d'un petit vocabulaire (recouvrements fréquents)."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        reference = [WORDS[i] for i in rng.integers(0, len(WORDS), size=rng.integers(1, 9))]
        candidate = [w for w in reference if rng.random() < 0.8]
        candidate += [WORDS[i] for i in rng.integers(0, len(WORDS), size=rng.integers(0, 3))]
        pairs.append((" ".join(candidate) or WORDS[0], " ".join(reference)))
    return [c for c, _ in pairs], [r for _, r in pairs]


def _clipped(candidate_grams: list, reference_grams: list) -> int:
    return sum(min(candidate_grams.count(g), reference_grams.count(g)) for g in set(candidate_grams))


def _brute_bleu(candidates, references) -> float:
    matches, totals = [0] * 4, [0] * 4
    c = r = 0
    for candidate, reference in zip(candidates, references):
        ct, rt = candidate.split(), reference.split()
        c += len(ct)
        r += len(rt)
        for n in range(1, 5):
            cg = [tuple(ct[i:i + n]) for i in range(len(ct) - n + 1)]
            rg = [tuple(rt[i:i + n]) for i in range(len(rt) - n + 1)]
            matches[n - 1] += _clipped(cg, rg)
            totals[n - 1] += len(cg)
    logs = [math.log(max(m, 1e-9) / t) for m, t in zip(matches, totals) if t > 0]
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(sum(logs) / len(logs))


def _brute_chrf(candidates, references) -> float:
    matches, cand_totals, ref_totals = [0] * 6, [0] * 6, [0] * 6
    for candidate, reference in zip(candidates, references):
        cs, rs = candidate.replace(" ", ""), reference.replace(" ", "")
        for n in range(1, 7):
            cg = [cs[i:i + n] for i in range(len(cs) - n + 1)]
            rg = [rs[i:i + n] for i in range(len(rs) - n + 1)]
            matches[n - 1] += _clipped(cg, rg)
            cand_totals[n - 1] += len(cg)
            ref_totals[n - 1] += len(rg)
    orders = [n for n in range(6) if cand_totals[n] and ref_totals[n]]
    precision = sum(matches[n] / cand_totals[n] for n in orders) / len(orders)
    recall = sum(matches[n] / ref_totals[n] for n in orders) / len(orders)
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 5.0 * precision * recall / (4.0 * precision + recall)


class TestBleu:
    """Tests pour le BLEU corpus."""

    def test_identical(self):
        assert bleu(["ana ray7 el shoghl delwa2ty"], ["ana ray7 el shoghl delwa2ty"]) == pytest.approx(1.0)

    def test_brevity_penalty_with_effective_orders(self):
        """Ordre 4 absent du candidat: exclu; seule la pénalité reste."""
        assert bleu(["the cat sat"], ["the cat sat down"]) == pytest.approx(math.exp(1.0 - 4.0 / 3.0))

    def test_no_match_is_tiny(self):
        assert bleu(["a b c d"], ["w x y z"]) < 1e-6

    def test_empty_candidate(self):
        assert bleu([""], ["the cat"]) == 0.0

    def test_corpus_statistics_are_pooled(self):
        matches, totals, cand_len, ref_len = bleu_statistics(["a b", "c"], ["a b", "d"])
        assert matches[0] == 2
        assert totals[0] == 3
        assert (cand_len, ref_len) == (3, 3)

    def test_length_mismatch(self):
        with pytest.raises(MetricInputError):
            bleu(["a"], ["a", "b"])

    def test_empty_corpus(self):
        with pytest.raises(MetricInputError):
            bleu([], [])

    def test_empty_reference(self):
        with pytest.raises(MetricInputError):
            bleu(["a"], [" "])

    def test_matches_brute_force_count(self):
        candidates, references = _pairs()
        assert bleu(candidates, references) == pytest.approx(_brute_bleu(candidates, references), abs=1e-9)

    def test_pair_order_irrelevant(self):
        candidates, references = _pairs()
        order = np.random.default_rng(2).permutation(len(candidates))
        shuffled = bleu([candidates[i] for i in order], [references[i] for i in order])
        assert shuffled == pytest.approx(bleu(candidates, references), abs=1e-12)


class TestChrf:
    """Tests pour chrF."""

    def test_identical(self):
        assert chrf(["7aga gameda"], ["7aga gameda"]) == pytest.approx(100.0)

    def test_disjoint(self):
        assert chrf(["abc"], ["xyz"]) == 0.0

    def test_whitespace_ignored(self):
        assert chrf(["7aga  gameda"], ["7aga gameda"]) == pytest.approx(100.0)

    def test_range(self):
        score = chrf(["حاجة جامدة"], ["حاجة حلوة"])
        assert 0.0 < score < 100.0

    def test_hand_computed(self):
        """ab contre abc: ordres 1 et 2 effectifs, P = 1, R = 7/12, F2 = 7/11."""
        assert chrf(["ab"], ["abc"]) == pytest.approx(700.0 / 11.0, abs=1e-9)

    def test_matches_brute_force_count(self):
        candidates, references = _pairs()
        assert chrf(candidates, references) == pytest.approx(_brute_chrf(candidates, references), abs=1e-9)


class TestMultipleChoice:
    """Tests pour le score des choix multiples."""

    def test_normalization_flips_choice(self, uniform_model):
        """Modèle uniforme: le brut préfère le moins d'octets, le normalisé le plus de caractères."""
        task = McTask(context="x", choices=["عx", "hello"], gold=1, apply_chat_template=False)
        assert mc_score(uniform_model, task, ScoreMode.RAW) == 0
        assert mc_score(uniform_model, task, ScoreMode.NORMALIZED) == 1

    def test_ties_pick_lowest_index(self):
        assert pick_choice([-1.0, -1.0, -2.0]) == 0
        assert pick_choice([-3.0, -1.0, -1.0]) == 1

    def test_gold_out_of_range(self):
        with pytest.raises(ValidationError):
            McTask(context="x", choices=["a", "b"], gold=2)

    def test_empty_choice_rejected(self):
        with pytest.raises(ValidationError):
            McTask(context="x", choices=["a", ""], gold=0)


class TestBenchmark:
    """Tests pour run_benchmark."""

    @pytest.fixture
    def small_suite(self):
        return BenchmarkSuite(tasks=[
            TaskSpec(name="mc", type=TaskType.MC, examples=[
                McTask(context="ezayak", choices=["kwayes", "وحش"], gold=0),
                McTask(context="3amel eh", choices=["tamam", "mesh", "ay"], gold=2),
            ]),
            TaskSpec(name="gen", type=TaskType.GENERATION, examples=[
                GenerationTask(prompt="ezayak", reference="الحمد لله"),
            ]),
            TaskSpec(name="broken", type=TaskType.MC, examples=[]),
        ])

    def test_failed_task_recorded(self, tiny_checkpoint, small_suite):
        """Une tâche en échec n'interrompt pas les autres."""
        report = run_benchmark(tiny_checkpoint, small_suite, seed=0, max_new_tokens=4)
        assert set(report.tasks) == {"mc", "gen"}
        assert "broken" in report.errors
        assert 0.0 <= report.tasks["mc"]["accuracy"] <= 1.0
        assert 0.0 <= report.tasks["gen"]["chrf"] <= 100.0
        assert report.metadata["checkpoint"] == tiny_checkpoint.metadata

    def test_greedy_is_deterministic(self, tiny_checkpoint, small_suite):
        a = run_benchmark(tiny_checkpoint, small_suite, seed=0, max_new_tokens=4)
        b = run_benchmark(tiny_checkpoint, small_suite, seed=9, max_new_tokens=4)
        assert a.tasks == b.tasks

    def test_empty_suite(self, tiny_checkpoint):
        with pytest.raises(MetricInputError):
            run_benchmark(tiny_checkpoint, BenchmarkSuite())

    def test_synthetic_suite(self):
        """Suite déterministe, cinq tâches, bonne réponse toujours présente."""
        suite = build_synthetic_suite(seed=3, n_mc=6, n_generation=2)
        again = build_synthetic_suite(seed=3, n_mc=6, n_generation=2)
        assert suite == again
        assert [t.name for t in suite.tasks] == [
            "completion-arabic", "completion-latin", "winogrande-style",
            "translit-to-latin", "translit-to-arabic",
        ]
        assert len(suite.mc_tasks) == 3
        winogrande = suite.tasks[2]
        assert all(not e.apply_chat_template and len(e.choices) == 2 for e in winogrande.examples)

    def test_suite_files(self, tmp_path):
        suite = build_synthetic_suite(seed=1, n_mc=4, n_generation=2)
        manifest = save_suite(suite, tmp_path / "suite")
        assert load_suite(manifest) == suite


class TestMetricReport:
    """Tests pour MetricReport."""

    def test_json_sorted_with_aggregate(self, tmp_path):
        report = MetricReport(
            tasks={"b": {"accuracy": 0.5}, "a": {"accuracy": 1.0, "bleu": 0.2}},
            metadata={"seed": 1},
        )
        data = json.loads(report.to_json())
        assert list(data) == sorted(data)
        assert data["aggregate"] == {"accuracy": 0.75, "bleu": 0.2}
        assert MetricReport.load(report.save(tmp_path / "r.json")) == report

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            MetricReport(tasks={"a": {"accuracy": 1.5}})

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            MetricReport(tasks={"a": {"perplexity": float("nan")}})

    def test_table(self):
        table = MetricReport(tasks={"a": {"accuracy": 1.0}}, errors={"b": "boom"}).to_table(title="t")
        assert table.row_count == 3


class TestRoutingAnalysis:
    """Tests pour routing_stats et specialization_score."""

    def test_specialization_closed_form(self):
        probabilities = np.array([[0.8, 0.2], [0.3, 0.7]])
        stats = RoutingStats(n_experts=2, scripts=["arabic", "latin"], counts=probabilities * 10,
                             probabilities=probabilities)
        assert specialization_score(stats) == pytest.approx(0.75)

    def test_stats_by_script(self):
        trace = RoutingTrace(n_experts=2, top_k=1, tokens=[
            TokenRoute(0, 0, "arabic", (0,), (1.0,), (0.9, 0.1)),
            TokenRoute(0, 1, "arabic", (0,), (1.0,), (0.6, 0.4)),
            TokenRoute(0, 2, "latin", (1,), (1.0,), (0.2, 0.8)),
            TokenRoute(0, 3, "other", (0,), (1.0,), (0.5, 0.5)),
        ])
        stats = routing_stats(trace)
        assert stats.scripts == ["arabic", "latin", "other"]
        np.testing.assert_allclose(stats.row("arabic"), [1.0, 0.0])
        np.testing.assert_allclose(stats.row("latin"), [0.0, 1.0])
        np.testing.assert_allclose(stats.row("other"), [0.5, 0.5])
        assert specialization_score(stats, ["arabic", "latin"]) == pytest.approx(1.0)
        np.testing.assert_allclose(stats.probabilities.sum(axis=1), 1.0)

    def test_single_script(self):
        trace = RoutingTrace(n_experts=2, top_k=1, tokens=[
            TokenRoute(0, 0, "latin", (1,), (1.0,), (0.2, 0.8)),
        ])
        with pytest.raises(MetricInputError):
            specialization_score(routing_stats(trace))

    def test_empty_trace(self):
        with pytest.raises(EmptyTraceError):
            routing_stats(RoutingTrace(n_experts=2, top_k=1))
