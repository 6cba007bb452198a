"""Loss terms and their weighted combination."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .layers import cosine_matrix


class ParameterError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class LossWeights:
    disent: float = 0.5
    aux: float = 0.5
    ortho: float = 1.0
    recomb: float = 0.5
    alpha_subject: float = 1.0
    alpha_action: float = 1.0
    alpha_object: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ParameterError(f"loss weight {name} must be nonnegative")


@dataclass
class LossBreakdown:
    clip: float
    sim: float
    l2: float
    recomb: float
    aux_subject: float
    aux_action: float
    aux_object: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_tau(tau) -> None:
    value = float(tau.detach()) if torch.is_tensor(tau) else float(tau)
    if not value > 0:
        raise ParameterError(f"temperature must be positive, got {value}")


def info_nce(queries: torch.Tensor, keys: torch.Tensor, tau, symmetric: bool = False) -> torch.Tensor:
    """Row i of ``queries`` is matched with row i of ``keys``; cosine logits over temperature."""
    _check_tau(tau)
    logits = cosine_matrix(queries, keys) / tau
    target = torch.arange(len(queries))
    loss = F.cross_entropy(logits, target)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, target))
    return loss


def clip_loss(video: torch.Tensor, text: torch.Tensor, tau, symmetric: bool = False) -> torch.Tensor:
    """Video-to-text InfoNCE over the batch; ``symmetric`` averages in text-to-video."""
    return info_nce(video, text, tau, symmetric)


def cross_entropies(probs, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    labels = torch.as_tensor(labels).long().reshape(-1, 3)
    out = []
    for axis, p in enumerate(probs):
        y = labels[:, axis]
        if bool(((y < 0) | (y >= p.shape[-1])).any()):
            raise LabelError(f"label outside [0, {p.shape[-1]}) on axis {axis}")
        # a float32 softmax can underflow to exactly 0
        out.append(F.nll_loss(torch.log(p.clamp_min(torch.finfo(p.dtype).tiny)), y))
    return tuple(out)


def aux_loss(probs, labels, alpha_subject=1.0, alpha_action=1.0, alpha_object=1.0) -> torch.Tensor:
    ce_s, ce_a, ce_o = cross_entropies(probs, labels)
    return alpha_subject * ce_s + alpha_action * ce_a + alpha_object * ce_o


def disent_enhanced(sim, l2, recomb, ortho_weight: float, recomb_weight: float):
    return ortho_weight * (sim + l2) + recomb_weight * recomb


def total_loss(clip, disent, aux, disent_weight: float, aux_weight: float):
    return clip + disent_weight * disent + aux_weight * aux
