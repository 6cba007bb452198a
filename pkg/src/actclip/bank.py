"""Class-indexed feature banks and compositional recombination.

Each bank slot holds the most recent detached branch feature seen for that
class, refreshed only on scheduled steps. Recombination draws
(subject, action, object) triplets from initialized slots, joins the stored
vectors with a trainable combiner and contrasts them against encodings of
the matching captions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .layers import MLP, BranchFeatures
from .synth_data import Triplet, Vocabularies
from .objective import LabelError, info_nce


class BankNotReadyError(RuntimeError):
    pass


class InsufficientNegativesError(ValueError):
    pass


class FeatureBank:
    def __init__(self, sizes: tuple[int, int, int], d_b: int, setting_step: int = 50):
        if setting_step < 1:
            raise ValueError("setting_step must be >= 1")
        self.sizes = tuple(sizes)
        self.d_b = d_b
        self.setting_step = setting_step
        self.tables = [torch.zeros(k, d_b) for k in self.sizes]
        self.initialized = [np.zeros(k, dtype=bool) for k in self.sizes]
        self.last_update_step = -1
        self.update_count = 0

    @property
    def subject_table(self) -> torch.Tensor:
        return self.tables[0]

    @property
    def action_table(self) -> torch.Tensor:
        return self.tables[1]

    @property
    def object_table(self) -> torch.Tensor:
        return self.tables[2]

    def is_ready(self) -> bool:
        return all(flags.any() for flags in self.initialized)

    def update(self, branches: BranchFeatures, labels: torch.Tensor, step: int) -> bool:
        """Direct replacement on steps divisible by setting_step; later rows win.

        ``labels`` is (B, 3) with subject/action/object ids. Returns whether
        the bank changed.
        """
        labels = torch.as_tensor(labels).long().reshape(-1, 3)
        for axis, k in enumerate(self.sizes):
            col = labels[:, axis]
            if bool(((col < 0) | (col >= k)).any()):
                raise LabelError(f"label outside [0, {k}) on axis {axis}")
        if step < 0:
            raise ValueError("step must be >= 0")
        if any(f.shape[-1] != self.d_b for f in branches):
            raise ValueError(f"bank stores {self.d_b}-dimensional branch features")
        if step % self.setting_step:
            return False
        with torch.no_grad():
            for axis, feats in enumerate(branches):
                table = self.tables[axis]
                for row, cls in enumerate(labels[:, axis].tolist()):
                    table[cls] = feats[row].detach().to(table.dtype)
                    self.initialized[axis][cls] = True
        self.last_update_step = step
        self.update_count += 1
        return True

    def lookup(self, triplets: list[Triplet]) -> BranchFeatures:
        idx = torch.tensor([list(t) for t in triplets], dtype=torch.long).reshape(-1, 3)
        return BranchFeatures(*(self.tables[a][idx[:, a]].clone() for a in range(3)))

    def state_dict(self) -> dict:
        return {
            "tables": [t.clone() for t in self.tables],
            "initialized": [f.tolist() for f in self.initialized],
            "setting_step": self.setting_step,
            "last_update_step": self.last_update_step,
            "update_count": self.update_count,
        }

    def load_state_dict(self, state: dict) -> None:
        for axis, t in enumerate(state["tables"]):
            if tuple(t.shape) != tuple(self.tables[axis].shape):
                raise ValueError(f"bank table {axis} shape {tuple(t.shape)} != {tuple(self.tables[axis].shape)}")
            self.tables[axis] = t.clone().float()
        self.initialized = [np.asarray(f, dtype=bool) for f in state["initialized"]]
        self.setting_step = int(state["setting_step"])
        self.last_update_step = int(state["last_update_step"])
        self.update_count = int(state["update_count"])


def sample_triplets(bank: FeatureBank, m: int, rng: np.random.Generator) -> list[Triplet]:
    """Uniform draw over the product of initialized slots, without replacement while possible."""
    axes = [np.flatnonzero(flags) for flags in bank.initialized]
    if any(len(a) == 0 for a in axes):
        raise BankNotReadyError("every bank table needs at least one initialized slot")
    if m <= 0:
        return []
    total = int(np.prod([len(a) for a in axes]))
    if m <= total:
        flat = rng.choice(total, size=m, replace=False)
    else:
        flat = np.concatenate([rng.permutation(total), rng.integers(0, total, size=m - total)])
    s, a, o = np.unravel_index(flat, tuple(len(x) for x in axes))
    return [Triplet(int(axes[0][i]), int(axes[1][j]), int(axes[2][k])) for i, j, k in zip(s, a, o)]


class Combiner(nn.Module):
    """Residual MLP over the concatenation [subject; action; object]."""

    def __init__(self, d_b: int):
        super().__init__()
        self.d_b = d_b
        self.mlp = MLP(3 * d_b, 3 * d_b, 3 * d_b)

    def forward(self, s: torch.Tensor, a: torch.Tensor, o: torch.Tensor) -> torch.Tensor:
        for t in (s, a, o):
            if t.shape[-1] != self.d_b:
                raise ValueError(f"combiner inputs must have dimension {self.d_b}, got {t.shape[-1]}")
        x = torch.cat([s, a, o], dim=-1)
        return x + self.mlp(x)


def recomb_caption(triplet: Triplet, vocab: Vocabularies) -> str:
    s, a, o = triplet.names(vocab)
    return f"{s.capitalize()} {a} the {o}, action is {a}"


@dataclass
class RecombinedSample:
    triplet: Triplet
    visual: torch.Tensor
    caption: str
    text: torch.Tensor


def recombination_loss(visual, text=None, tau=1.0) -> torch.Tensor:
    """InfoNCE over the sampled set: each recombined vector against every sampled caption.

    Accepts either stacked (M, 3*d_b) visual/text tensors or a list of
    RecombinedSample.
    """
    if isinstance(visual, (list, tuple)):
        samples = visual
        if not samples:
            raise InsufficientNegativesError("recombination needs at least two sampled triplets")
        visual = torch.stack([r.visual for r in samples])
        text = torch.stack([r.text for r in samples])
    if visual.shape[0] < 2:
        raise InsufficientNegativesError("recombination needs at least two sampled triplets")
    return info_nce(visual, text, tau)
