"""Self-attention over the fused visual vector, three-way branch projection,
the branch orthogonality and magnitude penalties, and auxiliary classifiers."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import MLP, BranchFeatures

L2_COEFF = 0.01


class DegenerateFeatureError(ValueError):
    """A branch vector has zero norm, i.e. the representation collapsed."""


class ClassProbabilities(NamedTuple):
    subject: torch.Tensor
    action: torch.Tensor
    object: torch.Tensor


class SelfAttention(nn.Module):
    """Multi-head attention with residual.

    In "single" mode the fused vector is a length-1 sequence, so every head puts
    weight exactly 1 on the only key. "tokens" mode attends over the four
    pre-fusion tokens and mean-pools.
    """

    def __init__(self, d_v: int, heads: int = 4, mode: str = "single"):
        super().__init__()
        if d_v % heads:
            raise ValueError("d_v must be divisible by heads")
        if mode not in ("single", "tokens"):
            raise ValueError(f"unknown attention mode {mode!r}")
        self.heads, self.mode = heads, mode
        self.q = nn.Linear(d_v, d_v)
        self.k = nn.Linear(d_v, d_v)
        self.v = nn.Linear(d_v, d_v)
        self.out = nn.Linear(d_v, d_v)
        self.last_weights: torch.Tensor | None = None

    def forward(self, f_v: torch.Tensor, tokens=None) -> torch.Tensor:
        squeeze = f_v.dim() == 1
        f_v = f_v[None] if squeeze else f_v
        if self.mode == "single":
            seq = f_v[:, None, :]
        else:
            seq = torch.stack([t[None] if squeeze else t for t in tokens], dim=1)
            if seq.shape[-1] != f_v.shape[-1]:
                raise ValueError("tokens mode needs d == d_v")
        B, L, D = seq.shape
        hd = D // self.heads
        split = lambda t: t.reshape(B, L, self.heads, hd).transpose(1, 2)
        q, k, v = split(self.q(seq)), split(self.k(seq)), split(self.v(seq))
        weights = (q @ k.transpose(-1, -2) / hd ** 0.5).softmax(dim=-1)
        self.last_weights = weights.detach()
        y = self.out((weights @ v).transpose(1, 2).reshape(B, L, D)).mean(dim=1)
        out = f_v + y
        return out[0] if squeeze else out


class BranchProjector(nn.Module):
    def __init__(self, d_v: int, d_b: int):
        super().__init__()
        self.subject = MLP(d_v, d_v, d_b)
        self.action = MLP(d_v, d_v, d_b)
        self.object = MLP(d_v, d_v, d_b)

    def forward(self, f_attn: torch.Tensor) -> BranchFeatures:
        return BranchFeatures(self.subject(f_attn), self.action(f_attn), self.object(f_attn))


class ClassifierHeads(nn.Module):
    def __init__(self, d_v: int, num_subjects: int, num_actions: int, num_objects: int):
        super().__init__()
        self.subject = nn.Linear(d_v, num_subjects)
        self.action = nn.Linear(d_v, num_actions)
        self.object = nn.Linear(d_v, num_objects)

    def forward(self, f_attn: torch.Tensor) -> ClassProbabilities:
        return ClassProbabilities(*(F.softmax(head(f_attn), dim=-1)
                                    for head in (self.subject, self.action, self.object)))


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def orthogonality_loss(branches: BranchFeatures, mode: str = "squared") -> torch.Tensor:
    """Mean pairwise branch cosine per sample.

    "squared" averages cos^2 over the three pairs (zero iff orthogonal);
    "signed" is the negated mean of raw cosines.
    """
    s, a, o = (t if t.dim() == 2 else t[None] for t in branches)
    for name, t in zip(("subject", "action", "object"), (s, a, o)):
        if bool((t.norm(dim=-1) == 0).any()):
            raise DegenerateFeatureError(f"zero-norm {name} branch vector")
    pairs = (_cos(s, a), _cos(s, o), _cos(a, o))
    if mode == "squared":
        return sum(c ** 2 for c in pairs).mean() / 3
    if mode == "signed":
        return -sum(pairs).mean() / 3
    raise ValueError(f"unknown orthogonality mode {mode!r}")


def l2_penalty(branches: BranchFeatures, coeff: float = L2_COEFF) -> torch.Tensor:
    s, a, o = (t if t.dim() == 2 else t[None] for t in branches)
    return coeff * (s.norm(dim=-1) + a.norm(dim=-1) + o.norm(dim=-1)).mean()
