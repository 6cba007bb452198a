"""Training loop: batching, loss assembly, updates, bank scheduling, metrics."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bank import FeatureBank, recomb_caption, recombination_loss, sample_triplets
from .config import RunConfig
from .disentangle import l2_penalty, orthogonality_loss
from .model import ActionCLIP
from .objective import LossBreakdown, clip_loss, cross_entropies, disent_enhanced, total_loss
from .synth_data import DatasetManifest, Triplet, Vocabularies, load_manifest, read_clip

log = logging.getLogger(__name__)

TAIL = 20


class DivergenceError(RuntimeError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} loss ({value}) at this step")
        self.term = term


@dataclass
class SplitData:
    video_ids: list[str]
    features: torch.Tensor
    text_base: torch.Tensor
    labels: torch.Tensor
    captions: list[str]
    triplets: list[Triplet]

    def __len__(self) -> int:
        return len(self.video_ids)

    def subset(self, idx) -> "SplitData":
        idx = [int(i) for i in idx]
        return SplitData([self.video_ids[i] for i in idx], self.features[idx], self.text_base[idx],
                         self.labels[idx], [self.captions[i] for i in idx], [self.triplets[i] for i in idx])


def build_split(model: ActionCLIP, manifest: DatasetManifest, split: str | None, workers: int = 1) -> SplitData:
    """Runs the frozen encoders once per clip; ``split=None`` takes every record."""
    records = [r for r in manifest.records if split is None or r.split == split]
    load = lambda r: model.frame_features(read_clip(manifest.resolve(r)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats = list(pool.map(load, records))
    else:
        feats = [load(r) for r in records]
    d, n = model.cfg.model.d, model.n_frames
    captions = [r.caption for r in records]
    return SplitData(
        video_ids=[r.video_id for r in records],
        features=torch.stack(feats) if feats else torch.zeros(0, n, d),
        text_base=model.text_base(captions) if captions else torch.zeros(0, model.cfg.model.d_t),
        labels=torch.tensor([list(r.triplet) for r in records], dtype=torch.long).reshape(-1, 3),
        captions=captions,
        triplets=[r.triplet for r in records],
    )


def set_deterministic(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class Trainer:
    def __init__(self, cfg: RunConfig, vocab: Vocabularies, model: ActionCLIP | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.model = model if model is not None else ActionCLIP(cfg, vocab)
        self.bank = FeatureBank(vocab.sizes, cfg.model.d_b, cfg.train.setting_step)
        self.optimizer = self._make_optimizer()
        self.step = 0
        self._text_cache: dict[str, torch.Tensor] = {}

    def _temperatures(self) -> list[torch.nn.Parameter]:
        taus = [self.model.temperature]
        if not self.cfg.loss.shared_temperature:
            taus.append(self.model.recomb_temperature)
        return taus

    def _make_optimizer(self) -> torch.optim.Optimizer:
        t = self.cfg.train
        tau_ids = {id(p) for p in self._temperatures()}
        decay = [p for p in self.model.parameters() if id(p) not in tau_ids]
        groups = [{"params": decay, "weight_decay": t.weight_decay},
                  {"params": self._temperatures(), "weight_decay": 0.0}]
        if t.optimizer == "adamw":
            return torch.optim.AdamW(groups, lr=t.lr)
        # decoupled decay is applied by hand in step(); SGD itself gets none
        for g in groups:
            g["decoupled_decay"] = g.pop("weight_decay")
        return torch.optim.SGD(groups, lr=t.lr, momentum=t.momentum, weight_decay=0.0)

    def _lr(self, step: int) -> float:
        t = self.cfg.train
        if t.warmup_steps > 0:
            return t.lr * min(1.0, (step + 1) / t.warmup_steps)
        return t.lr

    def batch_indices(self, step: int, size: int) -> np.ndarray:
        t = self.cfg.train
        rng = np.random.default_rng([self.cfg.seeds.data, step])
        b = min(t.batch_size, size)
        if t.class_balanced and self._class_weights is not None:
            return rng.choice(size, b, replace=False, p=self._class_weights)
        return rng.choice(size, b, replace=False)

    _class_weights = None

    def set_class_balance(self, data: SplitData) -> None:
        counts = torch.bincount(data.labels[:, 1], minlength=self.vocab.sizes[1]).double()
        w = (1.0 / counts[data.labels[:, 1]]).numpy()
        self._class_weights = w / w.sum()

    def _recomb_text(self, captions: list[str]) -> torch.Tensor:
        missing = [c for c in captions if c not in self._text_cache]
        if missing:
            for c, v in zip(missing, self.model.text_base(missing)):
                self._text_cache[c] = v
        return torch.stack([self._text_cache[c] for c in captions])

    def losses(self, batch: SplitData, step: int) -> tuple[dict[str, torch.Tensor], object]:
        """Every loss term for one batch, as differentiable tensors."""
        model, lc = self.model, self.cfg.loss
        branches, probs = model.encode_video(batch.features)
        text = model.encode_text(batch.text_base)
        terms = {
            "clip": clip_loss(branches.concat(), text.concat(), model.temperature, lc.symmetric_clip),
            "sim": orthogonality_loss(branches, lc.ortho_mode),
            "l2": l2_penalty(branches),
        }
        terms["recomb"] = torch.zeros(())
        if self.bank.is_ready() and np.prod([f.sum() for f in self.bank.initialized]) >= 2:
            rng = np.random.default_rng([self.cfg.seeds.sampling, step])
            triplets = sample_triplets(self.bank, self.cfg.train.recomb_samples, rng)
            if len(triplets) >= 2:
                stored = self.bank.lookup(triplets)
                visual = model.combiner(*stored)
                captions = [recomb_caption(t, self.vocab) for t in triplets]
                recomb_text = model.encode_text(self._recomb_text(captions)).concat()
                terms["recomb"] = recombination_loss(visual, recomb_text, model.recomb_tau)
        terms["aux_subject"], terms["aux_action"], terms["aux_object"] = cross_entropies(probs, batch.labels)
        aux = lc.alpha_subject * terms["aux_subject"] + lc.alpha_action * terms["aux_action"] \
            + lc.alpha_object * terms["aux_object"]
        disent = disent_enhanced(terms["sim"], terms["l2"], terms["recomb"], lc.ortho, lc.recomb)
        terms["total"] = total_loss(terms["clip"], disent, aux, lc.disent, lc.aux)
        return terms, branches

    def train_step(self, batch: SplitData, step: int | None = None) -> LossBreakdown:
        step = self.step if step is None else step
        self.model.train()
        terms, branches = self.losses(batch, step)
        values = {k: float(v.detach()) for k, v in terms.items()}
        for name, value in values.items():
            if not math.isfinite(value):
                raise DivergenceError(name, value)
        self.optimizer.zero_grad(set_to_none=True)
        terms["total"].backward()
        lr = self._lr(step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
            decay = group.get("decoupled_decay", 0.0)
            if decay:
                with torch.no_grad():
                    for p in group["params"]:
                        p.mul_(1.0 - lr * decay)
        self.optimizer.step()
        with torch.no_grad():
            for tau in self._temperatures():
                tau.clamp_(self.cfg.loss.tau_min, self.cfg.loss.tau_max)
        self.bank.update(branches.detach(), batch.labels, step)
        self.step = step + 1
        return LossBreakdown(**values)


@dataclass
class TrainResult:
    trainer: Trainer
    checkpoint: Path
    metrics: Path
    history: list[dict] = field(default_factory=list)


def train(cfg: RunConfig, resume: str | Path | None = None, manifest: DatasetManifest | None = None,
          until: int | None = None) -> TrainResult:
    """Runs steps [start, until or cfg.train.steps); writes metrics and checkpoints under train.out_dir."""
    from .checkpoint import load_checkpoint, save_checkpoint

    set_deterministic(cfg.train.deterministic)
    if manifest is None:
        manifest = load_manifest(cfg.data.manifest_path())
    trainer = Trainer(cfg, manifest.vocab)
    # checkpoints keep a short metrics tail without wall times, so identical runs give identical files
    tail: list[dict] = []
    if resume is not None:
        tail = list(load_checkpoint(resume, trainer)["metrics_tail"])
    data = build_split(trainer.model, manifest, "train", workers=1 if cfg.train.deterministic else 4)
    if len(data) < 2:
        raise ValueError("training split needs at least two clips")
    if cfg.train.class_balanced:
        trainer.set_class_balance(data)

    out = Path(cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    history: list[dict] = []
    stop = cfg.train.steps if until is None else min(until, cfg.train.steps)
    start_time = time.time()
    with open(metrics_path, "a" if resume is not None else "w") as log_file:
        while trainer.step < stop:
            step = trainer.step
            batch = data.subset(trainer.batch_indices(step, len(data)))
            breakdown = trainer.train_step(batch, step)
            row = {"step": step, **breakdown.to_dict(), "tau": float(trainer.model.temperature.detach()),
                   "wall_time": round(time.time() - start_time, 4)}
            history.append(row)
            tail = (tail + [{k: v for k, v in row.items() if k != "wall_time"}])[-TAIL:]
            log_file.write(json.dumps(row) + "\n")
            every = cfg.train.checkpoint_every
            if every and trainer.step % every == 0 and trainer.step < stop:
                save_checkpoint(out / f"step_{trainer.step:06d}.ckpt", trainer, tail)
            if step % 100 == 0:
                log.info("step %d total %.4f clip %.4f", step, breakdown.total, breakdown.clip)
    final = out / ("final.ckpt" if stop == cfg.train.steps else f"step_{stop:06d}.ckpt")
    save_checkpoint(final, trainer, tail)
    return TrainResult(trainer, final, metrics_path, history)
