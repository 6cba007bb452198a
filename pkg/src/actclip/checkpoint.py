"""Checkpoint files.

Layout: b"RACK", u32 version, u64 index length, a UTF-8 JSON index, then the
concatenated little-endian float32 tensor blobs. Each index entry gives
{name, shape, dtype, byte_offset} relative to the start of the blob section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import from_dict
from .synth_data import Vocabularies

MAGIC = b"RACK"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _optimizer_tensors(optimizer: torch.optim.Optimizer):
    state = optimizer.state_dict()
    tensors, scalars = {}, {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            if torch.is_tensor(value):
                tensors[f"optim.{idx}.{key}"] = value
            else:
                scalars[f"{idx}.{key}"] = value
    return tensors, scalars, state["param_groups"]


def save_checkpoint(path: str | Path, trainer, metrics_tail=None) -> Path:
    path = Path(path)
    tensors = {f"param.{n}": p for n, p in trainer.model.named_parameters()}
    for name, table in zip(("subject", "action", "object"), trainer.bank.tables):
        tensors[f"bank.{name}"] = table
    optim_tensors, optim_scalars, param_groups = _optimizer_tensors(trainer.optimizer)
    tensors.update(optim_tensors)

    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        data = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32", "byte_offset": offset})
        blobs.append(data)
        offset += len(data)
    bank = trainer.bank.state_dict()
    index = {
        "tensors": entries,
        "blob_bytes": offset,
        "step": trainer.step,
        "config": trainer.cfg.to_dict(),
        "vocabularies": trainer.vocab.to_dict(),
        "bank": {k: v for k, v in bank.items() if k != "tables"},
        "optimizer": {"type": trainer.cfg.train.optimizer, "param_groups": param_groups, "scalars": optim_scalars},
        "metrics_tail": list(metrics_tail or []),
    }
    raw = json.dumps(index).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise TruncatedBlobError(f"{path}: file shorter than header")
    magic, version, n = _HEAD.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"{path}: not a version-{VERSION} checkpoint")
    if len(data) < _HEAD.size + n:
        raise TruncatedBlobError(f"{path}: index truncated")
    index = json.loads(data[_HEAD.size:_HEAD.size + n])
    blob = data[_HEAD.size + n:]
    if len(blob) != index["blob_bytes"]:
        raise TruncatedBlobError(f"{path}: blob section has {len(blob)} bytes, index expects {index['blob_bytes']}")
    tensors = {}
    for e in index["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["byte_offset"] + 4 * count
        if end > len(blob):
            raise TruncatedBlobError(f"{path}: tensor {e['name']} runs past end of blob")
        arr = np.frombuffer(blob[e["byte_offset"]:end], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return index, tensors


def load_checkpoint(path: str | Path, trainer) -> dict:
    """Restores parameters, bank, optimizer state and step counter into ``trainer``."""
    index, tensors = read_checkpoint(path)
    params = dict(trainer.model.named_parameters())
    bank_names = {f"bank.{n}": i for i, n in enumerate(("subject", "action", "object"))}
    for name, t in tensors.items():
        if name.startswith("param."):
            target = params.get(name[len("param."):])
            if target is None:
                raise UnknownTensorError(f"checkpoint tensor {name} has no counterpart in the model")
            expected = tuple(target.shape)
        elif name in bank_names:
            expected = tuple(trainer.bank.tables[bank_names[name]].shape)
        elif name.startswith("optim."):
            continue
        else:
            raise UnknownTensorError(f"unknown checkpoint tensor {name}")
        if tuple(t.shape) != expected:
            raise ShapeMismatchError(f"tensor {name}: checkpoint shape {tuple(t.shape)} != model shape {expected}")
    missing = [n for n in params if f"param.{n}" not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing)}")

    echo = from_dict(index["config"])
    if echo.model != trainer.cfg.model:
        raise ConfigMismatchError("checkpoint model configuration differs from the run configuration")
    if Vocabularies.from_dict(index["vocabularies"]) != trainer.vocab:
        raise ConfigMismatchError("checkpoint vocabularies differ from the dataset vocabularies")
    if index["optimizer"]["type"] != trainer.cfg.train.optimizer:
        raise ConfigMismatchError("checkpoint optimizer type differs from the run configuration")

    with torch.no_grad():
        for name, p in params.items():
            p.copy_(tensors[f"param.{name}"])
    bank_state = dict(index["bank"])
    bank_state["tables"] = [tensors[f"bank.{n}"] for n in ("subject", "action", "object")]
    trainer.bank.load_state_dict(bank_state)

    state = {}
    for name, t in tensors.items():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = t
    for key, value in index["optimizer"]["scalars"].items():
        idx, k = key.split(".", 1)
        state.setdefault(int(idx), {})[k] = value
    trainer.optimizer.load_state_dict({"state": state, "param_groups": index["optimizer"]["param_groups"]})
    trainer.step = int(index["step"])
    return index


def load_trainer(path: str | Path):
    """Builds a Trainer from the configuration echoed inside a checkpoint."""
    from .trainer import Trainer

    index, _ = read_checkpoint(path)
    trainer = Trainer(from_dict(index["config"]), Vocabularies.from_dict(index["vocabularies"]))
    load_checkpoint(path, trainer)
    return trainer
