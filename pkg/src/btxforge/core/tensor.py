"""
Moteur tensoriel dense avec différentiation automatique en mode inverse.

Jeu d'opérations fermé et minimal, suffisant pour un transformer décodeur:
    matmul, add, mul, softmax, rms_norm, embedding (gather),
    transpose, reshape, cross_entropy, sigmoid, log

Tout le reste (soustraction, SiLU, moyennes, log-sigmoïde...) est composé
à partir de ces opérations, de sorte que chaque chemin de gradient est couvert
par la suite de différences finies.

Précision:
    - float32 par défaut
    - float64 pour la vérification de gradient (tout le graphe)

Politique NaN: toute valeur non finie produite par une opération lève
immédiatement NonFiniteError avec le nom de l'opération et l'id du tenseur.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from btxforge.errors import (
    EmptyLossSupportError,
    NonFiniteError,
    ShapeError,
    TapeError,
    TokenRangeError,
)

logger = structlog.get_logger(__name__)

_tensor_ids = itertools.count(1)
_local = threading.local()

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", float, int, np.ndarray]


def _thread_state() -> threading.local:
    """État par thread: pile de bandes, dtype par défaut, no_grad."""
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.dtype = np.dtype(np.float32)
        _local.grad_enabled = True
    return _local


def get_default_dtype() -> np.dtype:
    """Dtype utilisé pour les tenseurs créés sans dtype explicite."""
    return _thread_state().dtype


@contextmanager
def default_dtype(dtype: Union[str, np.dtype, type]) -> Iterator[None]:
    """Change temporairement le dtype par défaut (ex: float64 pour gradcheck)."""
    state = _thread_state()
    previous = state.dtype
    state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Désactive l'enregistrement sur la bande."""
    state = _thread_state()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


class Tensor:
    """
    Tableau numérique dense participant à la bande de gradient.

    Attributes:
        data: Buffer numpy contigu
        requires_grad: Le tenseur reçoit un gradient
        grad: Gradient accumulé (même forme que data)
        id: Identifiant unique (diagnostic)
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "_tape")

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence],
        requires_grad: bool = False,
        dtype: Optional[Union[str, np.dtype, type]] = None,
    ):
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype.kind == "f":
            array = data
        elif isinstance(data, np.generic) and data.dtype.kind == "f":
            # scalaire 0-d produit par une opération: garde sa précision
            array = np.asarray(data)
        else:
            array = np.asarray(data, dtype=get_default_dtype())

        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.id = next(_tensor_ids)
        self._tape: Optional[GradTape] = None

    # --- Propriétés ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        """Vrai si le tenseur n'est produit par aucune opération enregistrée."""
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # --- Surcharges (composées) ---

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        return (
            f"Tensor(id={self.id}, shape={self.shape}, dtype={self.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


@dataclass
class TapeRecord:
    """Entrée de la bande: (op, entrées, sortie, fermeture backward)."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class GradTape:
    """
    Bande de gradient ordonnée.

    Une bande par thread d'entraînement; une seule passe backward par bande,
    après quoi elle est vidée et ne peut plus être utilisée.

    Usage:
        with GradTape():
            loss = cross_entropy(...)
            backward(loss)
    """

    def __init__(self) -> None:
        self._records: List[TapeRecord] = []
        self._consumed = False

    def __enter__(self) -> GradTape:
        _thread_state().tapes.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        tapes = _thread_state().tapes
        if tapes and tapes[-1] is self:
            tapes.pop()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    @property
    def records(self) -> List[TapeRecord]:
        """Copie des enregistrements (ordre topologique)."""
        return list(self._records)

    def record(self, entry: TapeRecord) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass")
        self._records.append(entry)

    def run_backward(self, root: Tensor) -> None:
        """Propage les gradients depuis la racine jusqu'aux feuilles."""
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass")

        grads = {root.id: np.ones_like(root.data)}

        for entry in reversed(self._records):
            upstream = grads.pop(entry.output.id, None)
            if upstream is None:
                continue

            input_grads = entry.backward(upstream)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = grad.astype(tensor.dtype, copy=False)
                if tensor.is_leaf:
                    # Accumulation additive (fan-out et micro-lots)
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                elif tensor.id in grads:
                    grads[tensor.id] = grads[tensor.id] + grad
                else:
                    grads[tensor.id] = grad

        self._records.clear()
        self._consumed = True


def _active_tape() -> Optional[GradTape]:
    state = _thread_state()
    if not state.grad_enabled or not state.tapes:
        return None
    return state.tapes[-1]


def backward(root: Tensor) -> None:
    """
    Passe backward depuis une racine scalaire.

    Args:
        root: Scalaire produit sous une bande active

    Raises:
        TapeError: Racine non scalaire, hors bande, ou bande déjà consommée
    """
    if root.size != 1:
        raise TapeError(f"backward requires a scalar root, got shape {root.shape}")
    if root._tape is None:
        if root.requires_grad:
            # racine = feuille: d root / d root = 1
            ones = np.ones_like(root.data)
            root.grad = ones if root.grad is None else root.grad + ones
            return
        raise TapeError("root was not produced under an active tape")
    root._tape.run_backward(root)


# ============================================================================
# Plomberie interne
# ============================================================================

def _as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(value, dtype=dtype))


def _emit(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, fn: BackwardFn) -> Tensor:
    result = Tensor(out)
    if not np.all(np.isfinite(out)):
        logger.error("non_finite_output", op=op, tensor_id=result.id)
        raise NonFiniteError(op, result.id)

    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._tape = tape
        tape.record(TapeRecord(op=op, inputs=inputs, output=result, backward=fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Réduit un gradient diffusé à la forme d'origine."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ============================================================================
# Opérations primitives
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Produit matriciel (avec dimensions de lot diffusées).

    Raises:
        ShapeError: Dimensions internes incompatibles
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    a_data, b_data = a.data, b.data
    out = np.matmul(a_data, b_data)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(g, np.swapaxes(b_data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return _unbroadcast(grad_a, a_data.shape), _unbroadcast(grad_b, b_data.shape)

    return _emit("matmul", (a, b), out, _backward)


def add(a: Operand, b: Operand) -> Tensor:
    """Addition élément par élément (diffusion numpy)."""
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    ta, tb = _as_tensor(a, like), _as_tensor(b, like)
    shape_a, shape_b = ta.shape, tb.shape
    try:
        out = ta.data + tb.data
    except ValueError as e:
        raise ShapeError(f"add cannot broadcast {shape_a} with {shape_b}") from e

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, shape_a), _unbroadcast(g, shape_b)

    return _emit("add", (ta, tb), out, _backward)


def mul(a: Operand, b: Operand) -> Tensor:
    """Produit élément par élément (diffusion numpy)."""
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    ta, tb = _as_tensor(a, like), _as_tensor(b, like)
    a_data, b_data = ta.data, tb.data
    try:
        out = a_data * b_data
    except ValueError as e:
        raise ShapeError(f"mul cannot broadcast {ta.shape} with {tb.shape}") from e

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _emit("mul", (ta, tb), out, _backward)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax stable (soustraction du maximum)."""
    axis = _check_axis(x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / np.sum(exp, axis=axis, keepdims=True)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax", (x,), out, _backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """
    Normalisation RMS sur le dernier axe: x / sqrt(mean(x²) + eps) · gain.

    Raises:
        ShapeError: gain non diffusable sur le dernier axe
    """
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm gain {gain.shape} does not match last axis of {x.shape}")

    x_data, gain_data = x.data, gain.data
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_rms = 1.0 / np.sqrt(np.mean(x_data * x_data, axis=-1, keepdims=True) + eps)
    x_hat = x_data * inv_rms
    out = x_hat * gain_data

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g_hat = g * gain_data
        mean_dot = np.mean(g_hat * x_hat, axis=-1, keepdims=True)
        grad_x = inv_rms * (g_hat - x_hat * mean_dot)
        grad_gain = (g * x_hat).reshape(-1, gain_data.shape[0]).sum(axis=0)
        return grad_x, grad_gain

    return _emit("rms_norm", (x, gain), out, _backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """
    Gather de lignes: table[ids].

    Sert aux plongements de tokens et à la sélection des tokens routés.

    Raises:
        TokenRangeError: Identifiant hors de [0, table.shape[0])
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TokenRangeError(f"id out of range for table with {table.shape[0]} rows")

    table_shape = table.shape
    out = table.data[ids]

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros(table_shape, dtype=g.dtype)
        np.add.at(grad, ids, g)
        return (grad,)

    return _emit("embedding", (table,), out, _backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permutation d'axes (inversion complète par défaut)."""
    perm = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in perm) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {perm} for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in perm]))
    out = np.transpose(x.data, perm)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _emit("transpose", (x,), out, _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Changement de forme (même nombre d'éléments)."""
    original = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {original} into {tuple(shape)}") from e

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(original),)

    return _emit("reshape", (x,), out, _backward)


def sigmoid(x: Tensor) -> Tensor:
    """Sigmoïde stable via tanh."""
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, _backward)


def log(x: Tensor) -> Tensor:
    """Logarithme naturel (x > 0; sinon NonFiniteError)."""
    x_data = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x_data)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g / x_data,)

    return _emit("log", (x,), out, _backward)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Entropie croisée moyenne sur les positions non masquées.

    Args:
        logits: [..., V]
        targets: Identifiants cibles [...] dans [0, V)
        mask: Drapeaux [...] (1 = position comptée)

    Returns:
        Scalaire: moyenne de -log softmax(logits)[cible]

    Raises:
        EmptyLossSupportError: Toutes les positions sont masquées
    """
    vocab = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenRangeError(f"target id out of range for vocabulary of {vocab}")

    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    if mask is None:
        weights = np.ones(flat_targets.shape, dtype=flat_logits.dtype)
    else:
        weights = np.asarray(mask, dtype=flat_logits.dtype).reshape(-1)
        if weights.shape != flat_targets.shape:
            raise ShapeError(f"mask {np.shape(mask)} does not match targets {targets.shape}")

    support = float(weights.sum())
    if support <= 0:
        raise EmptyLossSupportError()

    rows = np.arange(flat_targets.shape[0])
    row_max = flat_logits.max(axis=-1, keepdims=True)
    shifted = flat_logits - row_max
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    nll = log_norm - shifted[rows, flat_targets]
    out = np.asarray((nll * weights).sum() / support, dtype=flat_logits.dtype)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, flat_targets] -= 1.0
        grad = probs * (weights / support)[:, None] * g
        return (grad.reshape(logits.shape),)

    return _emit("cross_entropy", (logits,), out, _backward)


# ============================================================================
# Compositions
# ============================================================================

def sub(a: Operand, b: Operand) -> Tensor:
    """a - b."""
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return add(_as_tensor(a, like), mul(_as_tensor(b, like), -1.0))


def silu(x: Tensor) -> Tensor:
    """SiLU: x · σ(x)."""
    return mul(x, sigmoid(x))


def log_sigmoid(x: Tensor) -> Tensor:
    """
    log σ(x) = min(x, 0) + log σ(|x|).

    σ(|x|) >= 0.5: le log reste fini pour tout x, en float32 comme en float64.
    """
    negative = (x.data < 0).astype(x.dtype)
    sign = np.where(x.data < 0, -1.0, 1.0).astype(x.dtype)
    return add(mul(x, negative), log(sigmoid(mul(x, sign))))


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """x · Wᵀ pour un poids au format [d_out × d_in]."""
    return matmul(x, transpose(weight, (1, 0)))


def mean_rows(x: Tensor) -> Tensor:
    """Moyenne sur le premier axe d'une matrice [T × N] → [1 × N]."""
    ones = np.full((1, x.shape[0]), 1.0 / x.shape[0], dtype=x.dtype)
    return matmul(Tensor(ones), x)


def to_scalar(x: Tensor) -> Tensor:
    """Tenseur à un élément → forme ()."""
    return reshape(x, ())


# ============================================================================
# Vérification par différences finies
# ============================================================================

def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare les gradients de la bande aux différences finies centrées.

    Args:
        fn: Fonction sans argument retournant un scalaire à partir de `inputs`
        inputs: Tenseurs (requires_grad) à vérifier
        h: Pas des différences finies
        max_elements: Nombre max d'éléments échantillonnés par entrée
        seed: Graine de l'échantillonnage

    Returns:
        Erreur relative maximale (norme) sur l'ensemble des entrées
    """
    for tensor in inputs:
        tensor.grad = None

    with GradTape():
        root = fn()
        backward(root)

    rng = np.random.default_rng(seed)
    worst = 0.0

    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat_count = tensor.size
        if max_elements is not None and flat_count > max_elements:
            positions = rng.choice(flat_count, size=max_elements, replace=False)
        else:
            positions = np.arange(flat_count)

        original = tensor.data
        numeric = np.zeros(len(positions), dtype=np.float64)
        with no_grad():
            for i, flat_index in enumerate(positions):
                index = np.unravel_index(flat_index, original.shape)
                plus = original.copy()
                plus[index] += h
                tensor.data = plus
                f_plus = fn().item()
                minus = original.copy()
                minus[index] -= h
                tensor.data = minus
                f_minus = fn().item()
                numeric[i] = (f_plus - f_minus) / (2.0 * h)
        tensor.data = original

        picked = analytic.reshape(-1)[positions].astype(np.float64)
        scale = max(np.linalg.norm(picked), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(picked - numeric) / scale))

    logger.debug("gradient_check_completed", inputs=len(inputs), max_rel_err=worst)
    return worst
