from __future__ import annotations

import hashlib
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class BranchFeatures(NamedTuple):
    subject: torch.Tensor
    action: torch.Tensor
    object: torch.Tensor

    def concat(self) -> torch.Tensor:
        """Joint embedding in (subject, object, action) order, as used by the contrastive losses."""
        return torch.cat([self.subject, self.object, self.action], dim=-1)

    def detach(self) -> "BranchFeatures":
        return BranchFeatures(*(t.detach() for t in self))


class MLP(nn.Sequential):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T


def tensor_digest(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
