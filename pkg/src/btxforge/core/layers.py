"""
Blocs du transformer composés à partir des opérations primitives.

    - FFN à porte: down(silu(gate(x)) · up(x))
    - encodage rotatif (base 10000), rotate_half réalisé par une matrice
      de permutation signée constante
    - attention causale multi-têtes (masque additif -1e9)
"""

from functools import lru_cache
from typing import NamedTuple, Tuple

import numpy as np

from btxforge.core.tensor import (
    Tensor,
    add,
    linear,
    matmul,
    mul,
    reshape,
    silu,
    softmax,
    transpose,
)

MASK_VALUE = -1e9


class FfnWeights(NamedTuple):
    """Poids d'un FFN à porte (format [d_out × d_in])."""
    up: Tensor
    gate: Tensor
    down: Tensor


def gated_ffn(x: Tensor, weights: FfnWeights) -> Tensor:
    """FFN à porte sur le dernier axe."""
    hidden = mul(silu(linear(x, weights.gate)), linear(x, weights.up))
    return linear(hidden, weights.down)


@lru_cache(maxsize=32)
def _rotary_tables(length: int, head_dim: int, base: float, dtype_name: str) -> Tuple[np.ndarray, ...]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.outer(np.arange(length, dtype=np.float64), inv_freq)
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)

    rotate = np.zeros((head_dim, head_dim), dtype=np.float64)
    for j in range(half):
        rotate[j + half, j] = -1.0
        rotate[j, j + half] = 1.0

    dtype = np.dtype(dtype_name)
    return cos.astype(dtype), sin.astype(dtype), rotate.astype(dtype)


def apply_rotary(x: Tensor, base: float = 10000.0) -> Tensor:
    """
    Encodage rotatif sur [..., T, head_dim].

    x·cos + rotate_half(x)·sin, avec rotate_half(x) = x·R.
    """
    length, head_dim = x.shape[-2], x.shape[-1]
    cos, sin, rotate = _rotary_tables(length, head_dim, float(base), x.dtype.name)
    rotated = matmul(x, Tensor(rotate))
    return add(mul(x, Tensor(cos)), mul(rotated, Tensor(sin)))


@lru_cache(maxsize=32)
def causal_mask(length: int, dtype_name: str) -> np.ndarray:
    """Masque additif [T × T]: 0 sur i >= j, -1e9 au-dessus de la diagonale."""
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(upper, MASK_VALUE, 0.0).astype(np.dtype(dtype_name))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, T, d] → [B, H, T, d/H]."""
    batch, length, d_model = x.shape
    heads = reshape(x, (batch, length, n_heads, d_model // n_heads))
    return transpose(heads, (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, T, hd] → [B, T, H·hd]."""
    batch, n_heads, length, head_dim = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (batch, length, n_heads * head_dim))


def causal_self_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    n_heads: int,
    rope_base: float = 10000.0,
) -> Tensor:
    """
    Attention causale multi-têtes.

    Args:
        x: [B, T, d] (déjà normalisé)
        wq, wk, wv, wo: Projections [d × d]
        n_heads: Nombre de têtes
        rope_base: Base de l'encodage rotatif

    Returns:
        [B, T, d]
    """
    head_dim = x.shape[-1] // n_heads
    q = apply_rotary(split_heads(linear(x, wq), n_heads), rope_base)
    k = apply_rotary(split_heads(linear(x, wk), n_heads), rope_base)
    v = split_heads(linear(x, wv), n_heads)

    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    scores = add(scores, Tensor(causal_mask(x.shape[1], x.dtype.name)))
    attended = matmul(softmax(scores, axis=-1), v)
    return linear(merge_heads(attended), wo)
