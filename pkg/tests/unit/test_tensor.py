"""
Tests unitaires pour le moteur tensoriel et la différentiation automatique.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from btxforge.core.tensor import (
    GradTape,
    Tensor,
    add,
    backward,
    cross_entropy,
    default_dtype,
    embedding,
    get_default_dtype,
    gradient_check,
    log,
    log_sigmoid,
    matmul,
    mul,
    no_grad,
    reshape,
    rms_norm,
    sigmoid,
    softmax,
    to_scalar,
    transpose,
)
from btxforge.errors import EmptyLossSupportError, NonFiniteError, ShapeError, TapeError, TokenRangeError

OP_TOLERANCE = 1e-6


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Réduction scalaire Σ w·x (poids fixes, non symétriques)."""
    flat = reshape(mul(x, Tensor(weights)), (1, x.size))
    return to_scalar(matmul(flat, Tensor(np.ones((x.size, 1)))))


def leaf(rng, *shape, low=None, high=None):
    data = rng.uniform(low, high, size=shape) if low is not None else rng.normal(size=shape)
    return Tensor(data.astype(np.float64), requires_grad=True)


class TestTensor:
    """Tests pour la classe Tensor."""

    def test_default_dtype_is_float32(self):
        """Les tenseurs créés sans dtype sont en float32."""
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert get_default_dtype() == np.float32

    def test_float_array_kept_as_is(self):
        """Un tableau flottant n'est pas recopié."""
        data = np.zeros(3, dtype=np.float64)
        assert Tensor(data).data is data

    def test_default_dtype_context(self):
        """default_dtype change temporairement le dtype."""
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_scalar_operand_follows_tensor_dtype(self):
        """Un scalaire prend le dtype du tenseur."""
        x = Tensor(np.ones(2, dtype=np.float64))
        assert (x * 2.0).dtype == np.float64
        assert (3.0 + x).dtype == np.float64

    def test_unique_ids(self):
        """Chaque tenseur a un identifiant distinct."""
        assert Tensor([1.0]).id != Tensor([1.0]).id

    def test_scalar_result_keeps_float64(self):
        """Un résultat 0-d float64 n'est pas ramené au dtype par défaut."""
        x = Tensor(np.array(1.0 + 1e-12, dtype=np.float64))
        y = mul(x, 1.0)
        assert y.dtype == np.float64
        assert y.item() == 1.0 + 1e-12
        assert Tensor(np.float32(2.0)).dtype == np.float32


class TestGradTape:
    """Tests pour la bande de gradient."""

    def test_identity_root(self):
        """f(x) = x: gradient 1."""
        x = Tensor(3.0, requires_grad=True)
        with GradTape():
            backward(x)
        np.testing.assert_allclose(x.grad, 1.0)

    def test_sum_of_squares(self):
        """sum(x·x): gradient 2x."""
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        with GradTape():
            backward(weighted_sum(mul(x, x), np.ones(3)))
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 1.0])

    def test_backward_fills_leaf_grad(self):
        """d(a·b)/da = b."""
        a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        b = Tensor(np.array([5.0, 7.0]))
        with GradTape():
            loss = weighted_sum(mul(a, b), np.ones(2))
            backward(loss)
        np.testing.assert_allclose(a.grad, [5.0, 7.0])
        assert b.grad is None

    def test_fan_out_accumulates(self):
        """Un tenseur utilisé deux fois reçoit la somme des gradients."""
        x = Tensor(np.array([1.5]), requires_grad=True)
        with GradTape():
            y = add(mul(x, 2.0), mul(x, 3.0))
            backward(weighted_sum(y, np.ones(1)))
        np.testing.assert_allclose(x.grad, [5.0])

    def test_leaves_accumulate_across_tapes(self):
        """Deux passes successives additionnent les gradients."""
        x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        for _ in range(2):
            with GradTape():
                backward(weighted_sum(x, np.array([1.0, 2.0])))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_tape_single_use(self):
        """Une bande consommée refuse une seconde passe."""
        x = Tensor(np.array([1.0]), requires_grad=True)
        with GradTape() as tape:
            loss = weighted_sum(x, np.ones(1))
            backward(loss)
            assert tape.consumed
            with pytest.raises(TapeError):
                backward(loss)

    def test_non_scalar_root_rejected(self):
        """La racine doit être scalaire."""
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape():
            y = mul(x, 2.0)
            with pytest.raises(TapeError):
                backward(y)

    def test_root_outside_tape_rejected(self):
        """Une racine calculée hors bande est refusée."""
        x = Tensor(np.ones(1), requires_grad=True)
        loss = weighted_sum(x, np.ones(1))
        with pytest.raises(TapeError):
            backward(loss)

    def test_no_grad_records_nothing(self):
        """no_grad désactive l'enregistrement."""
        x = Tensor(np.ones(2), requires_grad=True)
        with GradTape() as tape:
            with no_grad():
                y = mul(x, 2.0)
            assert len(tape) == 0
            assert not y.requires_grad


class TestPrimitiveOps:
    """Tests de valeur des opérations primitives."""

    def test_matmul_shape_error(self):
        """Dimensions internes incompatibles."""
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_broadcast_error(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_softmax_rows_sum_to_one(self):
        """Les lignes du softmax somment à 1."""
        out = softmax(Tensor(np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]])))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0)
        np.testing.assert_allclose(out.data[1], [0.25, 0.75])

    def test_rms_norm_unit_rms(self):
        """Avec gain 1, la sortie a une RMS de 1."""
        x = Tensor(np.array([[3.0, 4.0]]))
        out = rms_norm(x, Tensor(np.ones(2)), eps=0.0)
        np.testing.assert_allclose(np.sqrt(np.mean(out.data ** 2)), 1.0)

    def test_rms_norm_gain_shape(self):
        with pytest.raises(ShapeError):
            rms_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_embedding_out_of_range(self):
        """Identifiant hors table."""
        with pytest.raises(TokenRangeError):
            embedding(Tensor(np.ones((4, 2))), np.array([0, 4]))

    def test_transpose_invalid_permutation(self):
        with pytest.raises(ShapeError):
            transpose(Tensor(np.ones((2, 3))), (0, 0))

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones(6)), (4, 2))

    def test_sigmoid_values(self):
        out = sigmoid(Tensor(np.array([0.0])))
        np.testing.assert_allclose(out.data, [0.5])

    def test_log_of_zero_raises_non_finite(self):
        """log(0) lève NonFiniteError avec le nom de l'opération."""
        with pytest.raises(NonFiniteError) as exc:
            log(Tensor(np.array([0.0, 1.0])))
        assert exc.value.op == "log"
        assert exc.value.tensor_id > 0

    def test_cross_entropy_uniform_logits(self):
        """Logits nuls: perte = ln V."""
        logits = Tensor(np.zeros((1, 3, 5)))
        loss = cross_entropy(logits, np.array([[0, 1, 4]]))
        assert loss.item() == pytest.approx(np.log(5.0))

    def test_cross_entropy_mask(self):
        """Les positions masquées ne comptent pas."""
        logits = Tensor(np.array([[[10.0, 0.0], [0.0, 10.0]]]))
        masked = cross_entropy(logits, np.array([[0, 0]]), np.array([[1, 0]]))
        full = cross_entropy(Tensor(logits.data[:, :1]), np.array([[0]]))
        assert masked.item() == pytest.approx(full.item())

    def test_cross_entropy_empty_support(self):
        """Masque entièrement nul."""
        with pytest.raises(EmptyLossSupportError, match="empty loss support"):
            cross_entropy(Tensor(np.zeros((1, 2, 3))), np.array([[0, 1]]), np.zeros((1, 2)))

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(TokenRangeError):
            cross_entropy(Tensor(np.zeros((1, 2, 3))), np.array([[0, 3]]))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_softmax_property(self, values):
        """Softmax: valeurs dans [0, 1], lignes de somme 1."""
        out = softmax(Tensor(values)).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)


class TestGradientCheck:
    """Gradients de la bande contre différences finies centrées (float64)."""

    def test_matmul(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        w = rng.normal(size=(3, 2))
        assert gradient_check(lambda: weighted_sum(matmul(a, b), w), [a, b]) <= OP_TOLERANCE

    def test_batched_matmul_broadcast(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 2)
        w = rng.normal(size=(2, 3, 2))
        assert gradient_check(lambda: weighted_sum(matmul(a, b), w), [a, b]) <= OP_TOLERANCE

    def test_add_broadcast(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        w = rng.normal(size=(3, 4))
        assert gradient_check(lambda: weighted_sum(add(a, b), w), [a, b]) <= OP_TOLERANCE

    def test_mul(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
        w = rng.normal(size=(2, 3))
        assert gradient_check(lambda: weighted_sum(mul(a, b), w), [a, b]) <= OP_TOLERANCE

    def test_softmax(self, rng):
        x = leaf(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        assert gradient_check(lambda: weighted_sum(softmax(x), w), [x]) <= OP_TOLERANCE

    def test_rms_norm(self, rng):
        x, gain = leaf(rng, 2, 3, 6), leaf(rng, 6)
        w = rng.normal(size=(2, 3, 6))
        assert gradient_check(lambda: weighted_sum(rms_norm(x, gain), w), [x, gain]) <= OP_TOLERANCE

    def test_embedding(self, rng):
        table = leaf(rng, 5, 3)
        ids = np.array([[0, 2, 2], [4, 1, 0]])
        w = rng.normal(size=(2, 3, 3))
        assert gradient_check(lambda: weighted_sum(embedding(table, ids), w), [table]) <= OP_TOLERANCE

    def test_transpose(self, rng):
        x = leaf(rng, 2, 3, 4)
        w = rng.normal(size=(4, 2, 3))
        assert gradient_check(lambda: weighted_sum(transpose(x, (2, 0, 1)), w), [x]) <= OP_TOLERANCE

    def test_reshape(self, rng):
        x = leaf(rng, 2, 6)
        w = rng.normal(size=(3, 4))
        assert gradient_check(lambda: weighted_sum(reshape(x, (3, 4)), w), [x]) <= OP_TOLERANCE

    def test_sigmoid(self, rng):
        x = leaf(rng, 4, 3)
        w = rng.normal(size=(4, 3))
        assert gradient_check(lambda: weighted_sum(sigmoid(x), w), [x]) <= OP_TOLERANCE

    def test_log(self, rng):
        x = leaf(rng, 3, 3, low=0.5, high=2.0)
        w = rng.normal(size=(3, 3))
        assert gradient_check(lambda: weighted_sum(log(x), w), [x]) <= OP_TOLERANCE

    def test_cross_entropy_with_mask(self, rng):
        logits = leaf(rng, 2, 3, 7)
        targets = rng.integers(0, 7, size=(2, 3))
        mask = np.array([[1, 0, 1], [1, 1, 0]])
        assert gradient_check(lambda: cross_entropy(logits, targets, mask), [logits]) <= OP_TOLERANCE

    def test_log_sigmoid(self, rng):
        x = leaf(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        assert gradient_check(lambda: weighted_sum(log_sigmoid(x), w), [x]) <= OP_TOLERANCE


class TestLogSigmoid:
    """log σ pour des arguments très négatifs."""

    @pytest.mark.parametrize("value", [-20.0, -100.0, -1e4, 0.0, 20.0])
    def test_finite_in_float32(self, value):
        x = Tensor(np.float32(value), requires_grad=True)
        with GradTape():
            out = log_sigmoid(x)
            backward(out)
        expected = -np.logaddexp(0.0, -value)
        assert out.item() == pytest.approx(expected, rel=1e-6, abs=1e-6)
        np.testing.assert_allclose(x.grad, 1.0 / (1.0 + np.exp(value)), atol=1e-6)

    def test_matches_reference_in_float64(self):
        values = np.array([-745.0, -30.0, -1.5, 0.0, 2.0, 40.0])
        out = log_sigmoid(Tensor(values))
        np.testing.assert_allclose(out.data, -np.logaddexp(0.0, -values), rtol=1e-12, atol=1e-15)
