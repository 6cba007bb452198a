import json
import struct

import pytest
import torch

from actclip.checkpoint import (CheckpointError, ConfigMismatchError, ShapeMismatchError, TruncatedBlobError,
                                UnknownTensorError, load_checkpoint, load_trainer, read_checkpoint, save_checkpoint)
from actclip.trainer import Trainer, build_split

from conftest import SMALL_VOCAB, small_config


@pytest.fixture
def trained(small_dataset, tmp_path):
    root, manifest = small_dataset
    cfg = small_config(tmp_path, momentum=0.9)
    trainer = Trainer(cfg, SMALL_VOCAB)
    data = build_split(trainer.model, manifest, "train")
    for step in range(4):
        trainer.train_step(data.subset(trainer.batch_indices(step, len(data))))
    path = save_checkpoint(tmp_path / "c.ckpt", trainer, [{"step": 3}])
    return trainer, data, path


def _forward(model, data):
    model.eval()
    with torch.no_grad():
        branches, probs = model.encode_video(data.features)
        return torch.cat([branches.concat(), *probs, model.encode_text(data.text_base).concat()], dim=-1)


def test_round_trip_bit_identical(trained):
    trainer, data, path = trained
    restored = load_trainer(path)
    assert torch.equal(_forward(trainer.model, data), _forward(restored.model, data))
    assert restored.step == 4
    assert all(torch.equal(a, b) for a, b in zip(trainer.bank.tables, restored.bank.tables))
    assert restored.optimizer.state_dict()["param_groups"] == trainer.optimizer.state_dict()["param_groups"]


def test_layout(trained):
    trainer, data, path = trained
    raw = path.read_bytes()
    magic, version, n = struct.unpack_from("<4sIQ", raw)
    assert (magic, version) == (b"RACK", 1)
    index = json.loads(raw[16:16 + n])
    entry = index["tensors"][0]
    assert set(entry) == {"name", "shape", "dtype", "byte_offset"} and entry["byte_offset"] == 0
    assert index["step"] == 4 and index["metrics_tail"] == [{"step": 3}]
    assert index["vocabularies"]["actions"] == list(SMALL_VOCAB.actions)
    names = {e["name"] for e in index["tensors"]}
    assert {"param.temperature", "bank.subject", "bank.action", "bank.object"} <= names
    assert any(n.startswith("optim.") for n in names)


def test_truncated(trained, tmp_path):
    trainer, data, path = trained
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TruncatedBlobError):
        read_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:10])
    with pytest.raises(TruncatedBlobError):
        read_checkpoint(bad)


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "x.ckpt")


def test_shape_mismatch_names_tensor(trained, tmp_path):
    trainer, data, path = trained
    cfg = small_config(tmp_path)
    cfg.model.d_b = 6
    with pytest.raises(ShapeMismatchError) as exc:
        load_checkpoint(path, Trainer(cfg, SMALL_VOCAB))
    assert "param.text_heads.subject.2.weight" in str(exc.value)


def test_unknown_tensor(trained, tmp_path):
    trainer, data, path = trained
    cfg = small_config(tmp_path)
    cfg.loss.shared_temperature = False
    other = Trainer(cfg, SMALL_VOCAB)
    extra = save_checkpoint(tmp_path / "extra.ckpt", other)
    with pytest.raises(UnknownTensorError) as exc:
        load_checkpoint(extra, Trainer(small_config(tmp_path), SMALL_VOCAB))
    assert "recomb_temperature" in str(exc.value)


def test_config_echo_checked(trained, tmp_path):
    trainer, data, path = trained
    cfg = small_config(tmp_path)
    cfg.model.attention_mode = "tokens"
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, Trainer(cfg, SMALL_VOCAB))
    cfg = small_config(tmp_path, optimizer="adamw")
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, Trainer(cfg, SMALL_VOCAB))
