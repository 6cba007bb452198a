"""Temporal difference encoder.

Frame features are differenced, the difference sequence runs through a
pre-norm transformer whose attention logits carry a learned relative-position
bias, and the last transformer output is fused with the start-end difference
and the two endpoint frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import MLP


class InsufficientFramesError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    max_relative_distance: int = 8
    d_v: int = 64

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.layers < 1 or self.max_relative_distance < 1:
            raise ValueError("layers and max_relative_distance must be >= 1")


def _check_frames(features: torch.Tensor) -> None:
    if features.shape[-2] < 2:
        raise InsufficientFramesError(f"need at least 2 frames, got {features.shape[-2]}")


def frame_diffs(features: torch.Tensor) -> torch.Tensor:
    """(..., n, d) -> (..., n-1, d); row i-2 holds F_i - F_{i-1}."""
    _check_frames(features)
    return features[..., 1:, :] - features[..., :-1, :]


def extract_last(outputs: torch.Tensor) -> torch.Tensor:
    return outputs[..., -1, :]


def start_end_diff(features: torch.Tensor) -> torch.Tensor:
    _check_frames(features)
    return features[..., -1, :] - features[..., 0, :]


def relative_offsets(length: int, max_distance: int) -> torch.Tensor:
    pos = torch.arange(length)
    return (pos[:, None] - pos[None, :]).clamp(-max_distance, max_distance) + max_distance


class RelativeSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / self.head_dim ** 0.5 + bias
        y = logits.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, L, D))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = RelativeSelfAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = MLP(d_model, 4 * d_model, d_model)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), bias)
        return x + self.ff(self.norm2(x))


class TemporalTransformer(nn.Module):
    """Bidirectional encoder; one scalar bias per clipped offset, shared by all layers and heads."""

    def __init__(self, cfg: TemporalConfig):
        super().__init__()
        self.max_distance = cfg.max_relative_distance
        self.relative_bias = nn.Parameter(torch.zeros(2 * cfg.max_relative_distance + 1))
        nn.init.normal_(self.relative_bias, std=0.02)
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_model, cfg.heads) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.d_model = cfg.d_model

    def bias_matrix(self, length: int) -> torch.Tensor:
        return self.relative_bias[relative_offsets(length, self.max_distance)]

    def forward(self, diffs: torch.Tensor) -> torch.Tensor:
        squeeze = diffs.dim() == 2
        x = diffs[None] if squeeze else diffs
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ValueError(f"expected (..., L, {self.d_model}) input, got {tuple(diffs.shape)}")
        bias = self.bias_matrix(x.shape[1])
        for layer in self.layers:
            x = layer(x, bias)
        x = self.norm(x)
        return x[0] if squeeze else x


class FusionMLP(nn.Module):
    def __init__(self, d: int, d_v: int):
        super().__init__()
        self.d = d
        self.mlp = MLP(4 * d, 2 * d, d_v)

    def forward(self, tem, delta, f1, fn) -> torch.Tensor:
        for t in (tem, delta, f1, fn):
            if t.shape[-1] != self.d:
                raise ValueError(f"fusion inputs must have dimension {self.d}, got {t.shape[-1]}")
        return self.mlp(torch.cat([tem, delta, f1, fn], dim=-1))


class TemporalDiffEncoder(nn.Module):
    def __init__(self, cfg: TemporalConfig):
        super().__init__()
        self.transformer = TemporalTransformer(cfg)
        self.fusion = FusionMLP(cfg.d_model, cfg.d_v)

    def tokens(self, features: torch.Tensor) -> tuple[torch.Tensor, ...]:
        tem = extract_last(self.transformer(frame_diffs(features)))
        return tem, start_end_diff(features), features[..., 0, :], features[..., -1, :]

    def forward(self, features: torch.Tensor):
        """Returns the fused visual vector and the four pre-fusion tokens."""
        toks = self.tokens(features)
        return self.fusion(*toks), toks
