"""Central finite-difference verification of analytic gradients, in float64."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .synth_data import Vocabularies

COMPONENTS = ("text_heads", "temporal", "fusion", "attention", "branches", "classifier", "combiner", "frozen")
# Denominator floor. A group whose true gradient is exactly zero (attention key
# biases under softmax shift invariance) shows only finite-difference roundoff,
# around 1e-10 in norm; the floor turns that into a ~1e-6 relative error
# instead of noise divided by noise.
DENOM_FLOOR = 1e-4


@dataclass
class GroupResult:
    name: str
    rel_error: float
    checked: int


@dataclass
class GradCheckReport:
    component: str
    eps: float
    tolerance: float
    groups: list[GroupResult] = field(default_factory=list)
    message: str = ""

    @property
    def max_rel_error(self) -> float:
        return max((g.rel_error for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def format(self) -> str:
        head = f"{self.component}: {'PASS' if self.passed else 'FAIL'} max rel error {self.max_rel_error:.3e} " \
               f"(tol {self.tolerance:g}, eps {self.eps:g})"
        if self.message:
            head += f" - {self.message}"
        lines = [head] + [f"  {g.name:<40} {g.rel_error:.3e} over {g.checked} entries" for g in self.groups]
        return "\n".join(lines)


def relative_error(analytic, numeric) -> float:
    """||a - n|| / max(||a||, ||n||, DENOM_FLOOR) over one parameter group.

    A norm ratio rather than a per-entry ratio, so individual near-zero entries
    do not dominate.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), DENOM_FLOOR))


def check_gradients(module: nn.Module, probe: Callable[[], torch.Tensor], eps: float = 1e-5,
                    max_elements: int | None = 128, seed: int = 0) -> list[GroupResult]:
    """Compares autograd against (f(p+eps) - f(p-eps)) / 2eps for each parameter tensor.

    Tensors larger than ``max_elements`` are checked on a seeded random subset.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    probe().backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params}
    module.zero_grad(set_to_none=True)

    results = []
    with torch.no_grad():
        for name, p in params:
            flat = p.data.view(-1)
            grad = analytic[name].view(-1)
            picks = np.arange(flat.numel())
            if max_elements is not None and flat.numel() > max_elements:
                picks = rng.choice(flat.numel(), max_elements, replace=False)
            numerics = []
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = probe().item()
                flat[i] = orig - eps
                f_minus = probe().item()
                flat[i] = orig
                numerics.append((f_plus - f_minus) / (2 * eps))
            error = relative_error(grad[picks].numpy(), numerics)
            results.append(GroupResult(name, error, len(picks)))
    return results


def _probe_for(component: str, model, gen: torch.Generator) -> tuple[nn.Module, Callable[[], torch.Tensor]]:
    m = model.cfg.model
    rand = lambda *shape: torch.randn(*shape, generator=gen, dtype=torch.float64)
    batch = 3
    if component == "text_heads":
        x = rand(batch, m.d_t)
        fn = lambda: model.text_heads(x).concat()
    elif component == "temporal":
        x = rand(batch, m.n_frames - 1, m.d)
        fn = lambda: model.temporal.transformer(x)
    elif component == "fusion":
        xs = [rand(batch, m.d) for _ in range(4)]
        fn = lambda: model.temporal.fusion(*xs)
    elif component == "attention":
        x = rand(batch, m.d_v)
        toks = [rand(batch, m.d) for _ in range(4)]
        fn = lambda: model.attention(x, toks)
    elif component == "branches":
        x = rand(batch, m.d_v)
        fn = lambda: model.branches(x).concat()
    elif component == "classifier":
        x = rand(batch, m.d_v)
        fn = lambda: torch.cat(list(model.classifier(x)), dim=-1)
    elif component == "combiner":
        xs = [rand(batch, m.d_b) for _ in range(3)]
        fn = lambda: model.combiner(*xs)
    else:
        raise ValueError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}")
    weights = rand(*fn().shape)
    return model.components()[component], lambda: (fn() * weights).sum()


def grad_check(component: str, eps: float = 1e-5, tol: float = 1e-4, cfg: RunConfig | None = None,
               vocab: Vocabularies | None = None, max_elements: int | None = 128, seed: int = 0) -> GradCheckReport:
    from .model import ActionCLIP

    cfg = cfg or RunConfig()
    vocab = vocab or Vocabularies(tuple(cfg.data.subjects), tuple(cfg.data.actions), tuple(cfg.data.objects))
    report = GradCheckReport(component, eps, tol)
    model = ActionCLIP(cfg, vocab).double()
    if component == "frozen":
        module = model.components()["frozen"]
        if not any(True for _ in module.parameters()):
            report.message = "no trainable parameters"
        return report
    gen = torch.Generator().manual_seed(seed)
    module, probe = _probe_for(component, model, gen)
    report.groups = check_gradients(module, probe, eps, max_elements, seed)
    return report
