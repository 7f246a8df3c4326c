"""
Tests unitaires pour l'optimiseur, les pertes et l'entraîneur.
"""

import math

import numpy as np
import pytest

from btxforge.core.tensor import no_grad
from btxforge.core.transformer import TransformerModel, init_model, is_ffn_tensor
from btxforge.data.records import Conversation, Message, PreferencePair, Role
from btxforge.errors import (
    DivergenceError,
    EmptyLossSupportError,
    ScheduleError,
    ShapeError,
    StageDataError,
)
from btxforge.merge.btx import MergePlan, merge_btx
from btxforge.training.losses import (
    dpo_terms,
    lm_loss,
    preference_loss,
    sequence_logprob,
    sft_loss_parts,
)
from btxforge.training.optim import AdamState, adamw_step, lr_schedule
from btxforge.training.trainer import (
    DpoCandidate,
    LossCurve,
    Stage,
    Trainer,
    accumulate_gradients,
    dpo_hyperparameter_search,
    token_windows,
    train_stage,
)
from btxforge.utils.config import DpoConfig, LoraConfig, MoeConfig, OptimConfig, ScheduleKind
from btxforge.utils.metrics import TrainingMetrics


@pytest.fixture
def long_chosen_pairs():
    """Dix paires: réponse choisie longue en arabe, rejetée d'un caractère."""
    return [
        PreferencePair(
            id=f"long-{i}",
            prompt=[Message(role=Role.USER, content=f"ezayak {i}")],
            chosen=f"الحمد لله كويس {i}",
            rejected="x",
        )
        for i in range(10)
    ]


def _grads(model: TransformerModel):
    return {name: t.grad.copy() for name, t in model.trainable_tensors().items()}


class TestLrSchedule:
    """Tests pour lr_schedule."""

    @pytest.fixture
    def cosine(self):
        return OptimConfig(peak_lr=1.0, warmup_ratio=0.1, schedule=ScheduleKind.COSINE, final_lr=0.1)

    def test_warmup_is_linear(self, cosine):
        assert lr_schedule(0, 100, cosine) == 0.0
        assert lr_schedule(5, 100, cosine) == pytest.approx(0.5)
        assert lr_schedule(10, 100, cosine) == pytest.approx(1.0)

    def test_cosine_midpoint_is_mean(self, cosine):
        """Milieu du cosinus = moyenne de peak et final."""
        assert lr_schedule(55, 100, cosine) == pytest.approx(0.55)
        assert lr_schedule(100, 100, cosine) == pytest.approx(0.1)

    def test_linear_decays_to_zero(self):
        cfg = OptimConfig(peak_lr=2.0, schedule=ScheduleKind.LINEAR)
        assert lr_schedule(0, 10, cfg) == pytest.approx(2.0)
        assert lr_schedule(5, 10, cfg) == pytest.approx(1.0)
        assert lr_schedule(10, 10, cfg) == pytest.approx(0.0)

    def test_full_warmup(self):
        cfg = OptimConfig(peak_lr=1.0, warmup_ratio=1.0)
        assert lr_schedule(10, 10, cfg) == pytest.approx(1.0)

    @pytest.mark.parametrize("step,total", [(-1, 10), (11, 10), (0, 0)])
    def test_out_of_range(self, step, total):
        with pytest.raises(ScheduleError):
            lr_schedule(step, total, OptimConfig(peak_lr=1.0))


class TestAdamW:
    """Tests pour adamw_step."""

    def test_zero_lr_keeps_params(self):
        params = {"w": np.array([1.0, -2.0])}
        new, state = adamw_step(params, {"w": np.array([0.3, 0.1])}, AdamState(), 0.0,
                                OptimConfig(peak_lr=0.0, weight_decay=0.1))
        np.testing.assert_array_equal(new["w"], params["w"])
        assert state.step == 1

    def test_first_step_is_sign_like(self):
        """Premier pas: Δ ≈ -lr · signe(g)."""
        params = {"w": np.zeros(3)}
        new, _ = adamw_step(params, {"w": np.array([2.0, -0.5, 1e-3])}, AdamState(), 0.1,
                            OptimConfig(peak_lr=0.1))
        np.testing.assert_allclose(new["w"], [-0.1, 0.1, -0.1], rtol=1e-4)

    def test_missing_grad_means_zero(self):
        params = {"w": np.ones(2)}
        new, state = adamw_step(params, {"w": None}, AdamState(), 0.1, OptimConfig(peak_lr=0.1))
        np.testing.assert_array_equal(new["w"], params["w"])
        assert not state.m["w"].any()

    def test_decoupled_weight_decay(self):
        params = {"w": np.array([2.0])}
        new, _ = adamw_step(params, {}, AdamState(), 0.1, OptimConfig(peak_lr=0.1, weight_decay=0.5))
        np.testing.assert_allclose(new["w"], [2.0 * (1 - 0.05)])

    def test_state_not_mutated(self):
        state = AdamState()
        adamw_step({"w": np.ones(2)}, {"w": np.ones(2)}, state, 0.1, OptimConfig(peak_lr=0.1))
        assert state.step == 0
        assert state.m == {}

    def test_grad_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adamw_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState(), 0.1, OptimConfig(peak_lr=0.1))


class TestLosses:
    """Tests pour les pertes LM, SFT et DPO."""

    def test_preference_loss_closed_form(self):
        assert preference_loss(1.0, 0.5) == pytest.approx(0.474077, abs=1e-6)
        assert preference_loss(0.0, 0.5) == pytest.approx(math.log(2.0))

    def test_dpo_at_initialization(self, tiny_checkpoint, preference_pairs):
        """Politique = référence: marge 0, perte ln 2."""
        policy = TransformerModel(tiny_checkpoint, trainable=False)
        reference = TransformerModel(tiny_checkpoint, trainable=False)
        for pair in preference_pairs:
            terms = dpo_terms(policy, reference, pair, beta=0.5)
            assert terms.margin == 0.0
            assert terms.loss.item() == pytest.approx(math.log(2.0), abs=1e-6)

    def test_large_negative_margin_stays_finite(self, tiny_checkpoint, long_chosen_pairs):
        """Politique qui défavorise fortement la réponse choisie: perte finie, égale à la forme fermée."""
        sharp = tiny_checkpoint.copy()
        sharp.tensors["head.out"] *= 1000.0
        policy = TransformerModel(sharp, trainable=False)
        reference = TransformerModel(tiny_checkpoint, trainable=False)
        with no_grad():
            terms = dpo_terms(policy, reference, long_chosen_pairs[0], beta=0.5)
        assert terms.logit < -17.0
        assert np.isfinite(terms.loss.item())
        assert terms.loss.item() == pytest.approx(preference_loss(terms.margin, 0.5), rel=1e-4)

    def test_float64_scalars_keep_precision(self, tiny_checkpoint, preference_pairs):
        checkpoint = tiny_checkpoint.astype(np.float64)
        model = TransformerModel(checkpoint, trainable=False)
        with no_grad():
            terms = dpo_terms(model, model, preference_pairs[0], beta=0.5)
        assert terms.loss.dtype == np.float64
        assert terms.loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_sequence_logprob_is_summed(self, tiny_checkpoint):
        """La log-probabilité d'une réponse plus longue est plus négative."""
        model = TransformerModel(tiny_checkpoint.astype(np.float64), trainable=False)
        prompt = [Message(role=Role.USER, content="ezayak")]
        with no_grad():
            short = sequence_logprob(model, prompt, "a").item()
            long = sequence_logprob(model, prompt, "a" * 20).item()
        assert long < short < 0.0

    def test_sft_without_assistant(self, tiny_checkpoint):
        model = TransformerModel(tiny_checkpoint)
        conversation = Conversation(messages=[Message(role=Role.USER, content="ezayak")])
        with pytest.raises(EmptyLossSupportError):
            sft_loss_parts(model, conversation)

    def test_lm_loss_adds_balance_term(self, tiny_config, moe_config, rng):
        ckpt = init_model(tiny_config.with_moe(moe_config), seed=0)
        model = TransformerModel(ckpt, trainable=False)
        windows = rng.integers(0, 256, size=(2, 9))
        parts = lm_loss(model, windows)
        assert parts.aux > 0.0
        assert parts.total.item() == pytest.approx(parts.ce + moe_config.lb_coeff * parts.aux, rel=1e-5)

    def test_lm_loss_dense_has_no_aux(self, tiny_checkpoint, rng):
        parts = lm_loss(TransformerModel(tiny_checkpoint, trainable=False), rng.integers(0, 256, size=(2, 9)))
        assert parts.aux == 0.0


class TestTokenWindows:
    """Tests pour token_windows."""

    def test_windows_have_target_column(self):
        windows = token_windows(["ezayak ya sa7by"] * 4, seq_len=8)
        assert windows.shape[1] == 9
        assert windows[0, 0] == 257

    def test_stream_too_short(self):
        with pytest.raises(StageDataError):
            token_windows(["ab"], seq_len=64)


class TestAccumulation:
    """Équivalence de l'accumulation de gradients."""

    def test_micro_batches_match_full_batch(self, tiny_checkpoint, rng):
        """4 micro-lots de 8 = un lot de 32."""
        model = TransformerModel(tiny_checkpoint.astype(np.float64))
        windows = rng.integers(0, 256, size=(32, 9))

        accumulate_gradients(model, [windows], lm_loss)
        full = _grads(model)
        accumulate_gradients(model, np.split(windows, 4), lm_loss)
        accumulated = _grads(model)

        for name, grad in full.items():
            np.testing.assert_allclose(accumulated[name], grad, atol=1e-5)


class TestTrainer:
    """Tests pour Trainer et train_stage."""

    @pytest.fixture
    def texts(self):
        return ["ezayak ya sa7by, 3amel eh?"] * 40

    def test_cpt_loss_decreases(self, tiny_checkpoint, texts):
        optim = OptimConfig(peak_lr=1e-2, effective_batch=4, micro_batch=2, steps=30, seq_len=16)
        _, curve = train_stage(tiny_checkpoint, texts, Stage.CPT, optim, seed=0)
        assert len(curve) == 30
        assert curve.tail_mean(3) < curve.head_mean(3)

    def test_deterministic_per_seed(self, tiny_checkpoint, texts, fast_optim):
        a, _ = train_stage(tiny_checkpoint, texts, Stage.CPT, fast_optim, seed=5)
        b, _ = train_stage(tiny_checkpoint, texts, Stage.CPT, fast_optim, seed=5)
        assert a.content_hash() == b.content_hash()
        assert a.content_hash() != tiny_checkpoint.content_hash()

    def test_first_step_uses_schedule_start(self, tiny_checkpoint, texts):
        """Pas 1 → lr(0): sans warmup, le premier pas est au pic."""
        optim = OptimConfig(peak_lr=1e-3, schedule=ScheduleKind.LINEAR, effective_batch=2, micro_batch=2,
                            steps=1, seq_len=16)
        _, curve = train_stage(tiny_checkpoint, texts, Stage.CPT, optim)
        assert curve.records[0].lr == pytest.approx(1e-3)

    def test_sft_trains(self, tiny_checkpoint, chat, fast_optim):
        trained, curve = train_stage(tiny_checkpoint, [chat], Stage.SFT, fast_optim, metadata="sft:test")
        assert trained.metadata == "sft:test"
        assert len(curve) == 3
        assert all(math.isfinite(loss) for loss in curve.losses)

    def test_lora_freezes_base(self, tiny_checkpoint, chat, fast_optim):
        """Avec LoRA, seules les cibles changent après repli."""
        trained, _ = train_stage(tiny_checkpoint, [chat], Stage.SFT, fast_optim, lora=LoraConfig(rank=2, alpha=4))
        for name in ("embed.tok", "head.out", "layers.0.norm1.gain"):
            np.testing.assert_array_equal(trained.tensors[name], tiny_checkpoint.tensors[name])
        assert not np.array_equal(trained.tensors["layers.0.attn.q"], tiny_checkpoint.tensors["layers.0.attn.q"])

    def test_ffn_only_branches_share_backbone(self, tiny_checkpoint, texts, fast_optim):
        """LoRA limité au FFN: deux branches gardent le tronc de la base, la moyenne le retrouve."""
        lora = LoraConfig(rank=64, alpha=64, targets=["layers.*.ffn.*"])
        arabic_texts = ["حاجة جامدة خالص"] * 40
        arabic, _ = train_stage(tiny_checkpoint, arabic_texts, Stage.CPT, fast_optim, lora=lora, seed=1)
        latin, _ = train_stage(tiny_checkpoint, texts, Stage.CPT, fast_optim, lora=lora, seed=2)
        merged = merge_btx(MergePlan(sources=[arabic, latin], include_base_as_expert=False,
                                     moe=MoeConfig(n_experts=2, top_k=2)))
        for name, array in tiny_checkpoint.tensors.items():
            if is_ffn_tensor(name):
                assert not np.array_equal(arabic.tensors[name], array), name
                continue
            np.testing.assert_array_equal(arabic.tensors[name], array)
            np.testing.assert_array_equal(merged.tensors[name], array)

    def test_wrong_data_type(self, tiny_checkpoint, fast_optim):
        with pytest.raises(StageDataError):
            train_stage(tiny_checkpoint, ["ezayak"], Stage.SFT, fast_optim)

    def test_empty_dataset(self, tiny_checkpoint, fast_optim):
        with pytest.raises(StageDataError):
            train_stage(tiny_checkpoint, [], Stage.CPT, fast_optim)

    def test_divergence(self, tiny_checkpoint, texts, fast_optim):
        """Poids non finis: DivergenceError avec le pas et l'étape."""
        broken = tiny_checkpoint.copy()
        broken.tensors["embed.tok"][:] = np.nan
        metrics = TrainingMetrics()
        with pytest.raises(DivergenceError) as exc:
            train_stage(broken, texts, Stage.CPT, fast_optim, metrics=metrics)
        assert exc.value.exit_code == 3
        assert b"btxforge_divergences_total" in metrics.render()

    def test_callbacks_and_stats(self, tiny_checkpoint, texts, fast_optim):
        trainer = Trainer(tiny_checkpoint, Stage.ANNEAL, fast_optim)
        seen = []
        trainer.on_step(seen.append)
        trainer.fit(texts)
        assert [r.step for r in seen] == [1, 2, 3]
        stats = trainer.get_stats()
        assert stats["stage"] == "anneal"
        assert stats["steps"] == 3
        assert stats["lora"] is False

    def test_metrics_recorded(self, tiny_checkpoint, texts, fast_optim, tmp_path):
        metrics = TrainingMetrics()
        train_stage(tiny_checkpoint, texts, Stage.CPT, fast_optim, metrics=metrics)
        assert b'btxforge_optimizer_steps_total{stage="cpt"} 3.0' in metrics.render()
        assert metrics.write(tmp_path / "cpt.prom").exists()


class TestLossCurve:
    """Tests pour LossCurve."""

    def test_tsv_round_trip(self, tiny_checkpoint, fast_optim, tmp_path):
        _, curve = train_stage(tiny_checkpoint, ["ezayak ya sa7by"] * 20, Stage.CPT, fast_optim)
        path = curve.write_tsv(tmp_path / "curves" / "cpt.tsv")
        assert path.read_text(encoding="utf-8").startswith("step\tstage\tlr\tloss\taux_loss")
        loaded = LossCurve.read_tsv(path)
        assert [r.step for r in loaded.records] == [1, 2, 3]
        np.testing.assert_allclose(loaded.losses, curve.losses, rtol=1e-8)


class TestDpoTraining:
    """Tests de l'étape DPO."""

    def test_one_step_raises_chosen_logprob(self, tiny_checkpoint, long_chosen_pairs):
        """Un pas β=0.5, lr=3e-6 augmente log π(réponse choisie) sur 10 paires."""
        start = tiny_checkpoint.astype(np.float64)
        optim = OptimConfig(peak_lr=1.0, effective_batch=10, micro_batch=10, steps=1)
        dpo = DpoConfig(beta=0.5, lr=3e-6)

        def chosen_logprob(checkpoint):
            model = TransformerModel(checkpoint, trainable=False)
            with no_grad():
                return sum(sequence_logprob(model, p.prompt, p.chosen).item() for p in long_chosen_pairs)

        trainer = Trainer(start, Stage.DPO, optim, dpo=dpo)
        trained, curve = trainer.fit(long_chosen_pairs)

        assert curve.records[0].lr == pytest.approx(3e-6)
        assert curve.records[0].loss == pytest.approx(math.log(2.0), abs=1e-9)
        assert chosen_logprob(trained) > chosen_logprob(start)

    def test_hyperparameter_search(self, tiny_checkpoint, preference_pairs):
        """Scores dans l'ordre de la grille; égalités résolues par l'ordre."""
        grid = [
            DpoCandidate(lr=3e-6, beta=0.5, full_finetune=True),
            DpoCandidate(lr=5e-6, beta=0.1, full_finetune=False),
        ]
        optim = OptimConfig(peak_lr=1.0, effective_batch=4, micro_batch=4, steps=1)
        result = dpo_hyperparameter_search(
            tiny_checkpoint, preference_pairs[:8], preference_pairs[8:], optim, seed=0, grid=grid
        )
        assert [c for c, _ in result.scores] == grid
        best_score = max(score for _, score in result.scores)
        first_best = next(c for c, score in result.scores if score == best_score)
        assert result.best == first_best
        assert result.best_accuracy == best_score
        assert 0.0 <= best_score <= 1.0

    def test_empty_grid(self, tiny_checkpoint, preference_pairs):
        with pytest.raises(StageDataError):
            dpo_hyperparameter_search(tiny_checkpoint, preference_pairs, preference_pairs,
                                      OptimConfig(peak_lr=1.0, steps=1), grid=[])
