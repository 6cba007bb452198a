import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from actclip.evaluation import (V2T, EmptySplitError, InsufficientDataError, compositional_eval, export_embeddings,
                                leakage_from_features, leakage_svg, probe_eval, probe_folds, retrieval_eval,
                                retrieval_from_features, retrieval_table)
from actclip.model import ActionCLIP
from actclip.synth_data import Triplet

from conftest import SMALL_VOCAB, small_config


@pytest.fixture(scope="module")
def untrained(tmp_path_factory):
    return ActionCLIP(small_config(tmp_path_factory.mktemp("ev")), SMALL_VOCAB)


def _triplets(n):
    return [Triplet(i % 2, i % 3, i % 5) for i in range(n)]


def test_oracle_features_are_perfect():
    g = torch.Generator().manual_seed(0)
    gallery = sorted(set(_triplets(30)))
    text = torch.randn(len(gallery), 12, generator=g)
    video_trips = _triplets(30)
    video = text[[gallery.index(t) for t in video_trips]]
    v2t, t2v = retrieval_from_features(video, video_trips, text, gallery)
    assert v2t.recall_at_1 == t2v.recall_at_1 == 1.0
    assert v2t.median_rank == 1.0 and v2t.gallery_size == len(gallery)
    assert t2v.gallery_size == 30


def test_gallery_of_one():
    v2t, _ = retrieval_from_features(torch.randn(3, 4), [Triplet(0, 0, 0)] * 3, torch.randn(1, 4), [Triplet(0, 0, 0)])
    assert v2t.recall_at_1 == 1.0 and v2t.median_rank == 1.0


def test_ties_count_against_query():
    v2t, _ = retrieval_from_features(torch.ones(2, 3), [Triplet(0, 0, 0), Triplet(0, 0, 1)], torch.ones(2, 3),
                                     [Triplet(0, 0, 0), Triplet(0, 0, 1)])
    assert v2t.recall_at_1 == 0.0 and v2t.median_rank == 2.0


def test_empty_inputs():
    with pytest.raises(EmptySplitError):
        retrieval_from_features(torch.zeros(0, 4), [], torch.randn(1, 4), [Triplet(0, 0, 0)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_ranking_scale_invariance(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    trips = _triplets(20)
    gallery = sorted(set(trips))
    video = torch.randn(20, 6, generator=g, dtype=torch.float64)
    text = torch.randn(len(gallery), 6, generator=g, dtype=torch.float64)
    assert retrieval_from_features(video, trips, text, gallery) == \
        retrieval_from_features(a * video, trips, b * text, gallery)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_ordering(seed):
    g = torch.Generator().manual_seed(seed)
    trips = _triplets(25)
    gallery = sorted(set(trips))
    for r in retrieval_from_features(torch.randn(25, 5, generator=g), trips, torch.randn(len(gallery), 5, generator=g),
                                     gallery):
        assert 0 <= r.recall_at_1 <= r.recall_at_5 <= 1
        assert 1 <= r.median_rank <= r.gallery_size


def test_untrained_model_near_chance(untrained, small_dataset):
    root, manifest = small_dataset
    v2t, t2v = retrieval_eval(untrained, manifest, "all")
    assert v2t.gallery_size == 18
    assert v2t.recall_at_1 <= 3 * v2t.chance
    assert t2v.recall_at_1 <= 3 * t2v.chance or t2v.recall_at_1 <= 3 / 18


def test_retrieval_deterministic(untrained, small_dataset):
    root, manifest = small_dataset
    assert retrieval_eval(untrained, manifest, "all") == retrieval_eval(untrained, manifest, "all")


def test_empty_split(untrained, small_dataset):
    root, manifest = small_dataset
    with pytest.raises(EmptySplitError):
        retrieval_eval(untrained, manifest, "nonexistent")


def test_compositional_gallery(untrained, small_dataset):
    root, manifest = small_dataset
    report = compositional_eval(untrained, manifest)
    assert report.direction == V2T
    assert report.gallery_size == len({r.triplet for r in manifest.split("test_unseen")})
    assert report.recall_at_1 <= 3 * report.chance
    with pytest.raises(ValueError):
        compositional_eval(untrained, manifest, split="train")


def _planted(n=120, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.stack([rng.integers(0, 2, n), rng.integers(0, 3, n), rng.integers(0, 4, n)], axis=1)
    noise = lambda: rng.normal(size=(n, 6))
    feats = []
    for axis in range(3):
        x = noise()
        x[np.arange(n), labels[:, axis]] += 4.0  # only branch `axis` carries label `axis`
        feats.append(x)
    return feats, labels


def test_planted_leakage_is_diagonal():
    feats, labels = _planted()
    m = leakage_from_features(feats, labels, seed=0)
    for i, name in enumerate(("subject", "action", "object")):
        assert m.accuracy[i][i] >= 0.9
        assert min(m.margins(name)) >= 0.2
    assert all(0 <= v <= 1 for row in m.accuracy for v in row)


def test_shuffled_labels_destroy_signal():
    feats, labels = _planted(n=300)
    m = leakage_from_features(feats, labels, seed=0, shuffle_labels=True)
    for row, chance in zip(m.accuracy, m.chance):
        assert all(v <= 3 * chance for v in row)


def test_probe_deterministic():
    feats, labels = _planted()
    assert leakage_from_features(feats, labels, seed=4) == leakage_from_features(feats, labels, seed=4)


def test_probe_folds():
    labels = np.array([0] * 10 + [1] * 2 + [2] * 5)
    train, test = probe_folds(labels, seed=0)
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(17))
    for c in range(3):
        assert (labels[test] == c).sum() >= 1 and (labels[train] == c).sum() >= 1
    assert (labels[test] == 0).sum() == 2


def test_insufficient_class_named():
    feats, labels = _planted(n=20)
    labels[:, 1] = 0
    labels[0, 1] = 2
    with pytest.raises(InsufficientDataError) as exc:
        leakage_from_features(feats, labels, vocab=SMALL_VOCAB)
    assert "lift" in str(exc.value) and exc.value.label == "action"


def test_probe_eval_and_outputs(untrained, small_dataset, tmp_path):
    root, manifest = small_dataset
    m = probe_eval(untrained, manifest, "all", seed=0)
    assert len(m.accuracy) == 3 and all(len(r) == 3 for r in m.accuracy)
    assert "F_action" in m.table() and json.dumps(m.to_dict())
    svg = leakage_svg(m, tmp_path / "l.svg")
    assert svg.read_text().lstrip().startswith("<?xml") and "<svg" in svg.read_text()
    assert "R@1" in retrieval_table(retrieval_eval(untrained, manifest, "all"))


def test_export(untrained, small_dataset, tmp_path):
    root, manifest = small_dataset
    n = export_embeddings(untrained, manifest, tmp_path / "e.jsonl")
    rows = [json.loads(l) for l in open(tmp_path / "e.jsonl")]
    assert n == len(rows) == len(manifest.records)
    assert set(rows[0]) == {"video_id", "subject", "action", "object"}
    assert len(rows[0]["action"]) == untrained.cfg.model.d_b
