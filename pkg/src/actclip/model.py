from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .bank import Combiner
from .config import RunConfig
from .disentangle import BranchProjector, ClassifierHeads, ClassProbabilities, SelfAttention
from .encoders import FrameEncoder, TextBranchHeads, TextEncoder, sample_frames
from .layers import BranchFeatures, tensor_digest
from .synth_data import Vocabularies
from .temporal import TemporalConfig, TemporalDiffEncoder


class ActionCLIP(nn.Module):
    """Frozen encoders plus every trainable block, wired end to end."""

    def __init__(self, cfg: RunConfig, vocab: Vocabularies):
        super().__init__()
        m, d = cfg.model, cfg.data
        self.cfg = cfg
        self.vocab = vocab
        self.n_frames = m.n_frames
        self.frame_encoder = FrameEncoder(d.height, d.width, m.d, seed=cfg.seeds.encoder)
        self.text_encoder = TextEncoder(m.d_t, m.text_buckets, seed=cfg.seeds.encoder + 1)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seeds.model)
            self.text_heads = TextBranchHeads(m.d_t, m.d_b)
            self.temporal = TemporalDiffEncoder(TemporalConfig(
                m.d, m.temporal_heads, m.temporal_layers, m.max_relative_distance, m.d_v))
            self.attention = SelfAttention(m.d_v, m.attention_heads, m.attention_mode)
            self.branches = BranchProjector(m.d_v, m.d_b)
            self.classifier = ClassifierHeads(m.d_v, *vocab.sizes)
            self.combiner = Combiner(m.d_b)
        self.temperature = nn.Parameter(torch.tensor(float(cfg.loss.tau_init)))
        if not cfg.loss.shared_temperature:
            self.recomb_temperature = nn.Parameter(torch.tensor(float(cfg.loss.tau_init)))

    def components(self) -> dict[str, nn.Module]:
        return {
            "text_heads": self.text_heads,
            "temporal": self.temporal.transformer,
            "fusion": self.temporal.fusion,
            "attention": self.attention,
            "branches": self.branches,
            "classifier": self.classifier,
            "combiner": self.combiner,
            "frozen": nn.ModuleList([self.frame_encoder, self.text_encoder]),
        }

    @property
    def recomb_tau(self) -> torch.Tensor:
        return self.temperature if self.cfg.loss.shared_temperature else self.recomb_temperature

    @torch.no_grad()
    def frame_features(self, frames: np.ndarray) -> torch.Tensor:
        """(T, H, W, 4) clip -> (n, d) frozen features of the uniformly sampled frames."""
        idx = sample_frames(len(frames), self.n_frames)
        return self.frame_encoder(torch.from_numpy(np.ascontiguousarray(frames[idx])))

    @torch.no_grad()
    def text_base(self, captions) -> torch.Tensor:
        return self.text_encoder(captions)

    def encode_video(self, features: torch.Tensor) -> tuple[BranchFeatures, ClassProbabilities]:
        f_v, tokens = self.temporal(features)
        f_attn = self.attention(f_v, tokens)
        return self.branches(f_attn), self.classifier(f_attn)

    def encode_text(self, base: torch.Tensor) -> BranchFeatures:
        return self.text_heads(base)

    def frozen_fingerprint(self) -> str:
        return tensor_digest(list(self.frame_encoder.buffers()) + list(self.text_encoder.buffers()))

    def parameter_fingerprint(self) -> str:
        return tensor_digest(p for _, p in sorted(self.named_parameters()))
