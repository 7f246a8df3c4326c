"""
Configuration pytest pour BTXForge.
"""

import socket

import numpy as np
import pytest

from btxforge.core.transformer import init_model
from btxforge.data.records import Conversation, Message, PreferencePair, Role
from btxforge.utils.config import ModelConfig, MoeConfig, OptimConfig


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Aucun accès réseau pendant les tests."""

    def _blocked(*args, **kwargs):
        raise RuntimeError("network access is disabled in tests")

    monkeypatch.setattr(socket.socket, "connect", _blocked)
    monkeypatch.setattr(socket, "create_connection", _blocked)


@pytest.fixture
def tiny_config():
    """Architecture minuscule (2 couches, d=16)."""
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_context=64)


@pytest.fixture
def tiny_checkpoint(tiny_config):
    """Checkpoint dense initialisé (graine 0)."""
    return init_model(tiny_config, seed=0)


@pytest.fixture
def moe_config():
    return MoeConfig(n_experts=2, top_k=2, lb_coeff=0.01)


@pytest.fixture
def fast_optim():
    """Optimiseur pour quelques pas rapides."""
    return OptimConfig(peak_lr=1e-2, effective_batch=4, micro_batch=2, steps=3, seq_len=16)


@pytest.fixture
def chat():
    """Conversation utilisateur/assistant."""
    return Conversation(
        id="chat-1",
        messages=[
            Message(role=Role.USER, content="ezayak"),
            Message(role=Role.ASSISTANT, content="الحمد لله"),
        ],
    )


@pytest.fixture
def preference_pairs():
    """Dix paires de préférence courtes."""
    pairs = []
    for i in range(10):
        pairs.append(PreferencePair(
            id=f"pair-{i}",
            prompt=[Message(role=Role.USER, content=f"so2al {i}")],
            chosen=f"جواب {i}",
            rejected=f"gawab {i}",
        ))
    return pairs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
