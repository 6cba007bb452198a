"""Retrieval, linear probing and compositional evaluation of a trained model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .layers import cosine_matrix
from .synth_data import DatasetManifest, Triplet, make_caption

LABELS = ("subject", "action", "object")
V2T, T2V = "video->text", "text->video"


class EmptySplitError(ValueError):
    pass


class InsufficientDataError(ValueError):
    def __init__(self, label: str, class_name: str, count: int):
        super().__init__(f"{label} class {class_name!r} has {count} example(s); the probe needs at least 2")
        self.label = label
        self.class_name = class_name


@dataclass
class RetrievalReport:
    direction: str
    recall_at_1: float
    recall_at_5: float
    median_rank: float
    gallery_size: int
    num_queries: int

    @property
    def chance(self) -> float:
        return 1.0 / self.gallery_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LeakageMatrix:
    """accuracy[i][j]: probe accuracy for label i read from branch j."""

    accuracy: list[list[float]]
    chance: list[float]

    def cell(self, label: str, branch: str) -> float:
        return self.accuracy[LABELS.index(label)][LABELS.index(branch)]

    def margins(self, label: str) -> list[float]:
        """Diagonal minus each off-diagonal cell of one row."""
        i = LABELS.index(label)
        row = self.accuracy[i]
        return [row[i] - row[j] for j in range(3) if j != i]

    def to_dict(self) -> dict:
        return {"rows": list(LABELS), "columns": [f"F_{b}" for b in LABELS],
                "accuracy": self.accuracy, "chance": self.chance}

    def table(self) -> str:
        lines = [f"{'label':<10}" + "".join(f"{'F_' + b:>12}" for b in LABELS) + f"{'chance':>10}"]
        for name, row, ch in zip(LABELS, self.accuracy, self.chance):
            lines.append(f"{name:<10}" + "".join(f"{v:>12.3f}" for v in row) + f"{ch:>10.3f}")
        return "\n".join(lines)


def _ranks(sim: np.ndarray, positive: np.ndarray) -> np.ndarray:
    """1-based rank of the best positive per row. Ties count against the query."""
    sim = np.asarray(sim, dtype=np.float64)
    best = np.where(positive, sim, -np.inf).max(axis=1)
    ahead = (~positive) & (sim >= best[:, None])
    return 1 + ahead.sum(axis=1)


def _report(direction: str, ranks: np.ndarray, gallery_size: int) -> RetrievalReport:
    return RetrievalReport(direction, float(np.mean(ranks <= 1)), float(np.mean(ranks <= 5)),
                           float(np.median(ranks)), gallery_size, len(ranks))


def retrieval_from_features(video: torch.Tensor, video_triplets: Sequence[Triplet], text: torch.Tensor,
                            text_triplets: Sequence[Triplet]) -> tuple[RetrievalReport, RetrievalReport]:
    """Cosine ranking in both directions.

    video->text: each clip ranks the text gallery (one entry per triplet).
    text->video: each gallery caption ranks the clips; the best-placed matching clip counts.
    """
    if len(video_triplets) == 0 or len(text_triplets) == 0:
        raise EmptySplitError("retrieval needs at least one clip and one caption")
    sim = cosine_matrix(video.double(), text.double()).numpy()
    match = np.array([[v == t for t in text_triplets] for v in video_triplets])
    if not match.any(axis=1).all():
        raise ValueError("every clip's triplet must appear in the text gallery")
    v2t = _report(V2T, _ranks(sim, match), len(text_triplets))
    t2v = _report(T2V, _ranks(sim.T, match.T), len(video_triplets))
    return v2t, t2v


def _records(manifest: DatasetManifest, split):
    if split is None or split == "all":
        return list(manifest.records)
    names = (split,) if isinstance(split, str) else tuple(split)
    return [r for r in manifest.records if r.split in names]


@torch.no_grad()
def embed_split(model, manifest: DatasetManifest, split=None):
    """Branch features of every clip in ``split`` (a name, a tuple of names, or None/'all')."""
    from .trainer import build_split

    records = _records(manifest, split)
    if not records:
        raise EmptySplitError(f"split {split!r} has no clips")
    sub = DatasetManifest(records, manifest.vocab, manifest.seed, manifest.root)
    data = build_split(model, sub, None)
    model.eval()
    branches, _ = model.encode_video(data.features)
    return data, branches


@torch.no_grad()
def retrieval_eval(model, manifest: DatasetManifest, split="test_seen") -> tuple[RetrievalReport, RetrievalReport]:
    data, branches = embed_split(model, manifest, split)
    gallery = sorted(set(data.triplets))
    captions = [make_caption(t, manifest.vocab) for t in gallery]
    text = model.encode_text(model.text_base(captions)).concat()
    return retrieval_from_features(branches.concat(), data.triplets, text, gallery)


def compositional_eval(model, manifest: DatasetManifest, split="test_unseen") -> RetrievalReport:
    """Video->text retrieval whose gallery is exactly the triplets never seen in training."""
    seen = {r.triplet for r in manifest.records if r.split == "train"}
    records = _records(manifest, split)
    leaked = {r.triplet for r in records} & seen
    if leaked:
        raise ValueError(f"{len(leaked)} triplet(s) of split {split!r} also occur in training")
    return retrieval_eval(model, manifest, split)[0]


def probe_folds(labels: np.ndarray, seed: int, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class contributes at least one test and one train example."""
    rng = np.random.default_rng(seed)
    test = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = min(max(1, int(round(test_fraction * len(idx)))), len(idx) - 1)
        test[idx[:k]] = True
    return np.flatnonzero(~test), np.flatnonzero(test)


def probe_accuracy(x: np.ndarray, y: np.ndarray, train: np.ndarray, test: np.ndarray) -> float:
    if len(np.unique(y[train])) < 2:
        return 1.0
    scaler = StandardScaler().fit(x[train])
    clf = LogisticRegression(max_iter=2000)
    clf.fit(scaler.transform(x[train]), y[train])
    return float(clf.score(scaler.transform(x[test]), y[test]))


def leakage_from_features(branches: Sequence[torch.Tensor | np.ndarray], labels: np.ndarray, vocab=None,
                          seed: int = 0, shuffle_labels: bool = False) -> LeakageMatrix:
    labels = np.asarray(labels).copy()
    names = (vocab.subjects, vocab.actions, vocab.objects) if vocab is not None else None
    for i, label in enumerate(LABELS):
        values, counts = np.unique(labels[:, i], return_counts=True)
        for v, c in zip(values, counts):
            if c < 2:
                raise InsufficientDataError(label, names[i][v] if names else str(v), int(c))
    if shuffle_labels:
        rng = np.random.default_rng([seed, 1])
        for i in range(3):
            labels[:, i] = rng.permutation(labels[:, i])
    feats = [np.asarray(b.detach().numpy() if torch.is_tensor(b) else b, dtype=np.float64) for b in branches]
    acc, chance = [], []
    for i in range(3):
        y = labels[:, i]
        train, test = probe_folds(y, seed + i)
        acc.append([probe_accuracy(x, y, train, test) for x in feats])
        chance.append(1.0 / len(np.unique(y)))
    return LeakageMatrix(acc, chance)


def probe_eval(model, manifest: DatasetManifest, split="all", seed: int = 0,
               shuffle_labels: bool = False) -> LeakageMatrix:
    data, branches = embed_split(model, manifest, split)
    return leakage_from_features(list(branches), data.labels.numpy(), manifest.vocab, seed, shuffle_labels)


def export_embeddings(model, manifest: DatasetManifest, path: str | Path, split=None) -> int:
    data, branches = embed_split(model, manifest, split)
    with open(path, "w") as f:
        for i, vid in enumerate(data.video_ids):
            row = {"video_id": vid, **{name: [round(float(x), 7) for x in b[i]] for name, b in zip(LABELS, branches)}}
            f.write(json.dumps(row) + "\n")
    return len(data)


def retrieval_table(reports: Sequence[RetrievalReport]) -> str:
    lines = [f"{'direction':<14}{'R@1':>8}{'R@5':>8}{'medR':>8}{'gallery':>9}{'chance':>9}"]
    for r in reports:
        lines.append(f"{r.direction:<14}{r.recall_at_1:>8.3f}{r.recall_at_5:>8.3f}{r.median_rank:>8.1f}"
                     f"{r.gallery_size:>9d}{r.chance:>9.3f}")
    return "\n".join(lines)


def leakage_svg(matrix: LeakageMatrix, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.25
    x = np.arange(3)
    for j, branch in enumerate(LABELS):
        ax.bar(x + (j - 1) * width, [row[j] for row in matrix.accuracy], width, label=f"F_{branch}")
    ax.set_xticks(x, [f"{l} label" for l in LABELS])
    ax.set_ylim(0, 1)
    ax.set_ylabel("probe accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
