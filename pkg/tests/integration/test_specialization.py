"""
Tests d'intégration - Expérience de spécialisation desk-scale.

Le profil livré est exécuté tel quel (plusieurs minutes sur CPU); les
rapports, le routage et les courbes de perte sont lus une seule fois
pour toute la classe.
"""

import json
import math

import pytest

from btxforge.pipeline import load_reports, run_pipeline
from btxforge.training.trainer import LossCurve
from btxforge.utils.config import load_config

pytestmark = [pytest.mark.integration, pytest.mark.slow]

SPECIALIZATION_FLOOR = 0.60
PERPLEXITY_SLACK = 1.25
SPECIALISTS = {"arabic": "branch_arabic", "latin": "branch_latin"}


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Pipeline desk-scale complet, graine du profil."""
    output_dir = tmp_path_factory.mktemp("desk-scale")
    config = load_config("desk-scale")
    run_pipeline(config, output_dir=output_dir)
    return config, output_dir


def _perplexity(reports, model: str, script: str) -> float:
    return reports[model].tasks[f"perplexity-{script}"]["perplexity"]


class TestDeskScaleSpecialization:
    """Critères de l'expérience complète sur les modèles fusionnés puis SFT."""

    def test_routing_specializes(self, desk_run):
        config, output_dir = desk_run
        for variant in config.merge.variants:
            summary = json.loads((output_dir / "routing" / f"sft_{variant.name}.json").read_text(encoding="utf-8"))
            scores = [layer["specialization"] for layer in summary["layers"]]
            assert scores
            assert min(scores) >= SPECIALIZATION_FLOOR, (variant.name, scores)

    @pytest.mark.parametrize("script", ["arabic", "latin"])
    def test_perplexity_close_to_matching_specialist(self, desk_run, script):
        config, output_dir = desk_run
        reports = load_reports(output_dir)
        matching = _perplexity(reports, SPECIALISTS[script], script)
        other = next(name for s, name in SPECIALISTS.items() if s != script)
        mismatched = _perplexity(reports, other, script)
        for variant in config.merge.variants:
            merged = _perplexity(reports, f"sft_{variant.name}", script)
            assert merged <= PERPLEXITY_SLACK * matching, (variant.name, merged, matching)
            assert merged < mismatched, (variant.name, merged, mismatched)

    def test_loss_curves_finite(self, desk_run):
        _, output_dir = desk_run
        curves = sorted((output_dir / "curves").glob("*.tsv"))
        assert curves
        for path in curves:
            curve = LossCurve.read_tsv(path)
            assert len(curve) > 0, path.name
            for record in curve.records:
                assert math.isfinite(record.loss) and math.isfinite(record.aux_loss), (path.name, record.step)
