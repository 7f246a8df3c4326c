"""
Moteur tensoriel, transformer décodeur et couche MoE.
"""

from btxforge.core.checkpoint import load_checkpoint, save_checkpoint
from btxforge.core.moe import RoutingTrace, TokenRoute, load_balance_loss, moe_forward, route_topk
from btxforge.core.tensor import GradTape, Tensor, backward, no_grad
from btxforge.core.tokenizer import BEGIN, END, PAD, SEP, VOCAB_SIZE, ByteTokenizer
from btxforge.core.transformer import (
    Checkpoint,
    ModelOutput,
    TransformerModel,
    forward_logits,
    generate,
    init_model,
    perplexity,
)

__all__ = [
    "BEGIN",
    "END",
    "PAD",
    "SEP",
    "VOCAB_SIZE",
    "ByteTokenizer",
    "Checkpoint",
    "GradTape",
    "ModelOutput",
    "RoutingTrace",
    "Tensor",
    "TokenRoute",
    "TransformerModel",
    "backward",
    "forward_logits",
    "generate",
    "init_model",
    "load_balance_loss",
    "load_checkpoint",
    "moe_forward",
    "no_grad",
    "perplexity",
    "route_topk",
    "save_checkpoint",
]
