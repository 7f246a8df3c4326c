"""
AdamW et planning du learning rate.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from btxforge.errors import ScheduleError, ShapeError
from btxforge.utils.config import OptimConfig, ScheduleKind


def warmup_steps(total_steps: int, cfg: OptimConfig) -> int:
    return int(round(cfg.warmup_ratio * total_steps))


def lr_schedule(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """
    Learning rate au pas `step`.

    Warmup linéaire 0 → peak_lr sur warmup_ratio·total_steps pas, puis
    décroissance cosinus (vers final_lr) ou linéaire (vers 0).

    Raises:
        ScheduleError: step hors de [0, total_steps]
    """
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")

    warmup = warmup_steps(total_steps, cfg)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if total_steps == warmup:
        return cfg.peak_lr

    progress = (step - warmup) / (total_steps - warmup)
    if cfg.schedule == ScheduleKind.COSINE:
        return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0
    return cfg.peak_lr * (1.0 - progress)


@dataclass
class AdamState:
    """Moments de premier et second ordre, pas courant."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    cfg: OptimConfig,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    Un pas AdamW (décroissance de poids découplée, moments corrigés du biais).

    Args:
        params: Nom → valeurs
        grads: Nom → gradient (None = gradient nul)
        state: État courant (non modifié)
        lr: Learning rate du pas
        cfg: beta1, beta2, eps, weight_decay

    Returns:
        (nouveaux paramètres, nouvel état)

    Raises:
        ShapeError: Gradient de forme différente du paramètre
    """
    t = state.step + 1
    correction1 = 1.0 - cfg.beta1 ** t
    correction2 = 1.0 - cfg.beta2 ** t

    new_params: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, theta in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(theta)
        elif grad.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {theta.shape}")

        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad

        decayed = theta * (1.0 - lr * cfg.weight_decay)
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        new_params[name] = (decayed - lr * update).astype(theta.dtype)
        new_m[name] = m.astype(theta.dtype)
        new_v[name] = v.astype(theta.dtype)

    return new_params, AdamState(step=t, m=new_m, v=new_v)
