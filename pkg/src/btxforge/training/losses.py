"""
Pertes d'entraînement.

    - modèle de langue sur flux de tokens (CPT, annealing)
    - SFT: entropie croisée sur le contenu assistant seulement
    - DPO: -log σ(β · marge), log-probabilités de séquence sommées
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import structlog

from btxforge.core.tensor import Tensor, add, cross_entropy, log_sigmoid, mul, no_grad, sub
from btxforge.core.tokenizer import serialize_conversation, serialize_messages
from btxforge.core.transformer import TransformerModel
from btxforge.data.records import Conversation, Message, PreferencePair, Role
from btxforge.errors import EmptyLossSupportError
from btxforge.utils.config import DpoConfig

logger = structlog.get_logger(__name__)


@dataclass
class LossParts:
    """Perte totale (à différentier) et ses composantes."""
    total: Tensor
    ce: float
    aux: float = 0.0


def _with_aux(model: TransformerModel, ce: Tensor, aux: Optional[Tensor]) -> LossParts:
    if aux is None or model.config.moe is None:
        return LossParts(total=ce, ce=ce.item())
    total = add(ce, mul(aux, model.config.moe.lb_coeff))
    return LossParts(total=total, ce=ce.item(), aux=aux.item())


def lm_loss(model: TransformerModel, windows: np.ndarray) -> LossParts:
    """
    Perte de modèle de langue sur des fenêtres [B × (T+1)].

    La perte d'équilibrage pondérée par lb_coeff s'ajoute pour un modèle MoE.
    """
    windows = np.asarray(windows, dtype=np.int64)
    output = model.forward(windows[:, :-1])
    ce = cross_entropy(output.logits, windows[:, 1:])
    return _with_aux(model, ce, output.aux_loss)


def sft_loss_parts(model: TransformerModel, conversation: Conversation) -> LossParts:
    """
    Perte SFT masquée (réponses seulement).

    Raises:
        EmptyLossSupportError: Aucun token assistant
        ContextOverflowError: Conversation trop longue
    """
    chat = serialize_conversation(conversation)
    if not chat.target_mask.any():
        raise EmptyLossSupportError()
    output = model.forward(chat.inputs[None, :])
    ce = cross_entropy(output.logits, chat.targets[None, :], chat.target_mask[None, :])
    return _with_aux(model, ce, output.aux_loss)


def sft_loss(model: TransformerModel, conversation: Conversation) -> Tensor:
    return sft_loss_parts(model, conversation).total


# ============================================================================
# DPO
# ============================================================================

def sequence_logprob(model: TransformerModel, prompt: Sequence[Message], completion: str) -> Tensor:
    """
    log π(completion | prompt), somme sur les tokens de la réponse (END inclus).

    Raises:
        EmptyLossSupportError: Réponse vide
    """
    chat = serialize_messages(list(prompt) + [Message(role=Role.ASSISTANT, content=completion)])
    mask = chat.target_mask
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossSupportError()
    logits = model.forward(chat.inputs[None, :]).logits
    mean_nll = cross_entropy(logits, chat.targets[None, :], mask[None, :])
    return mul(mean_nll, -float(count))


@dataclass
class DpoTerms:
    """Perte DPO et marge avant sigmoïde."""
    loss: Tensor
    margin: float
    beta: float

    @property
    def logit(self) -> float:
        """Argument de σ: β · marge."""
        return self.beta * self.margin


def dpo_terms(
    policy: TransformerModel,
    reference: TransformerModel,
    pair: PreferencePair,
    beta: float,
) -> DpoTerms:
    """
    Perte DPO d'une paire.

    marge = (log π(y_w) - log π_ref(y_w)) - (log π(y_l) - log π_ref(y_l));
    le modèle de référence est évalué sans bande.
    """
    with no_grad():
        ref_chosen = sequence_logprob(reference, pair.prompt, pair.chosen).item()
        ref_rejected = sequence_logprob(reference, pair.prompt, pair.rejected).item()

    chosen = sequence_logprob(policy, pair.prompt, pair.chosen)
    rejected = sequence_logprob(policy, pair.prompt, pair.rejected)
    margin = sub(sub(chosen, ref_chosen), sub(rejected, ref_rejected))
    loss = mul(log_sigmoid(mul(margin, beta)), -1.0)
    return DpoTerms(loss=loss, margin=margin.item(), beta=beta)


def dpo_loss(
    policy: TransformerModel,
    reference: TransformerModel,
    pair: PreferencePair,
    cfg: DpoConfig,
) -> Tensor:
    return dpo_terms(policy, reference, pair, cfg.beta).loss


def preference_loss(margin: float, beta: float) -> float:
    """-log σ(β · marge) en float64."""
    return float(np.logaddexp(0.0, -beta * margin))
