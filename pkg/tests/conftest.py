from pathlib import Path

import pytest
import torch

from actclip.config import RunConfig
from actclip.synth_data import SynthSpec, Vocabularies, generate_dataset

SMALL_VOCAB = Vocabularies(("robot", "human"), ("grasp", "rotate", "lift"), ("cup", "drawer", "lid"))


def small_config(tmp: Path, **train) -> RunConfig:
    cfg = RunConfig()
    cfg.data.subjects, cfg.data.actions, cfg.data.objects = (list(x) for x in
                                                             (SMALL_VOCAB.subjects, SMALL_VOCAB.actions,
                                                              SMALL_VOCAB.objects))
    cfg.data.num_frames = 12
    cfg.data.out_dir = str(tmp / "data")
    cfg.model.d = cfg.model.d_t = cfg.model.d_v = 16
    cfg.model.d_b = 8
    cfg.model.n_frames = 8
    cfg.model.text_buckets = 256
    cfg.train.batch_size = 8
    cfg.train.steps = 12
    cfg.train.setting_step = 3
    cfg.train.recomb_samples = 6
    cfg.train.lr = 1e-3
    cfg.train.out_dir = str(tmp / "train")
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    spec = SynthSpec(SMALL_VOCAB, num_frames=12, clips_per_triplet=3, holdout_fraction=0.2)
    manifest = generate_dataset(spec, 3, root / "data")
    return root, manifest


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
