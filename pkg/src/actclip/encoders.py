"""Frozen per-frame and text encoders, frame sampling, and the trainable text heads.

The frozen encoders are deterministic functions of their seed: every weight
is a registered buffer, so nothing here is visible to an optimizer.
"""

from __future__ import annotations

import hashlib
import re
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import MLP, BranchFeatures, tensor_digest

POOL = 8
NORM_EPS = 1e-5


class EmptyVideoError(ValueError):
    pass


class InvalidTextError(ValueError):
    pass


def sample_frames(num_frames: int, n: int) -> np.ndarray:
    """Indices round(j * (T - 1) / (n - 1)), j = 0..n-1, rounding halves up."""
    if num_frames < 1:
        raise EmptyVideoError("video has no frames")
    if n < 2:
        raise ValueError("need at least two sampled frames")
    j = np.arange(n)
    return (2 * j * (num_frames - 1) + (n - 1)) // (2 * (n - 1))


def normalize_vector(v: torch.Tensor) -> torch.Tensor:
    mean = v.mean(dim=-1, keepdim=True)
    std = v.std(dim=-1, unbiased=False, keepdim=True)
    return (v - mean) / (std + NORM_EPS)


def _gaussian(shape, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64).float()


class FrameEncoder(nn.Module):
    """Pool to 8x8x4, random Gaussian projection 256 -> d, per-vector standardization."""

    def __init__(self, height: int, width: int, d: int = 64, seed: int = 0):
        super().__init__()
        self.height, self.width, self.d = height, width, d
        self.register_buffer("projection", _gaussian((POOL * POOL * 4, d), seed) / (POOL * POOL * 4) ** 0.5)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-3:] != (self.height, self.width, 4):
            raise ValueError(f"expected frames (..., {self.height}, {self.width}, 4), got {tuple(frames.shape)}")
        lead = frames.shape[:-3]
        x = frames.reshape(-1, self.height, self.width, 4).permute(0, 3, 1, 2)
        x = F.adaptive_avg_pool2d(x.to(self.projection.dtype), POOL)
        x = x.permute(0, 2, 3, 1).reshape(x.shape[0], -1)
        return normalize_vector(x @ self.projection).reshape(*lead, self.d)

    def fingerprint(self) -> str:
        return tensor_digest(self.buffers())


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def token_bucket(token: str, buckets: int) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


class TextEncoder(nn.Module):
    """Hashed bag-of-words: mean of seeded token embeddings, standardized."""

    def __init__(self, d_t: int = 64, buckets: int = 4096, seed: int = 0):
        super().__init__()
        self.d_t, self.buckets = d_t, buckets
        self.register_buffer("embedding", _gaussian((buckets, d_t), seed))

    def encode_one(self, text: str) -> torch.Tensor:
        tokens = tokenize(text)
        if not tokens:
            raise InvalidTextError(f"no tokens in {text!r}")
        idx = torch.tensor([token_bucket(t, self.buckets) for t in tokens])
        return normalize_vector(self.embedding[idx].mean(dim=0))

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        return torch.stack([self.encode_one(t) for t in texts])

    def fingerprint(self) -> str:
        return tensor_digest(self.buffers())


class TextBranchHeads(nn.Module):
    """Three unshared MLPs mapping the frozen text vector into subject/action/object spaces."""

    def __init__(self, d_t: int = 64, d_b: int = 32):
        super().__init__()
        self.subject = MLP(d_t, d_t, d_b)
        self.action = MLP(d_t, d_t, d_b)
        self.object = MLP(d_t, d_t, d_b)

    def forward(self, base: torch.Tensor) -> BranchFeatures:
        return BranchFeatures(self.subject(base), self.action(base), self.object(base))
