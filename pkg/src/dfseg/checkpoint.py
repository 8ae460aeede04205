"""Checkpoint directories: ``manifest.json`` plus raw little-endian float32 ``params.bin``."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import MissingDependencyError
from .models import ModelConfig, init_model

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.bin"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_checkpoint(model: nn.Module, path) -> Path:
    """Write ``model`` (with its ``config``) to the directory ``path``.

    The directory is assembled under a temporary name and renamed into place.
    Integer buffers are stored as float32 and cast back on load.
    """
    path = Path(path)
    state = model.state_dict()
    entries, blobs = [], []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32"})
        blobs.append(arr.tobytes(order="C"))
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": entries,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        (tmp / PARAMS).write_bytes(b"".join(blobs))
        (tmp / MANIFEST).write_text(dump_json(manifest))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path) -> nn.Module:
    path = Path(path)
    if not (path / MANIFEST).is_file() or not (path / PARAMS).is_file():
        raise MissingDependencyError(f"no checkpoint at {path}")
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    model = init_model(ModelConfig.from_dict(manifest["config"]))
    raw = np.frombuffer((path / PARAMS).read_bytes(), dtype="<f4")
    template = model.state_dict()
    state, offset = {}, 0
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arr = raw[offset:offset + size].reshape(entry["shape"])
        offset += size
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(template[entry["name"]].dtype)
    if offset != raw.size:
        raise ValueError(f"{path / PARAMS} has {raw.size - offset} trailing values")
    model.load_state_dict(state)
    model.eval()
    return model


def checkpoint_hash(path) -> str:
    """SHA-256 over the parameter blob of a checkpoint directory."""
    return hashlib.sha256((Path(path) / PARAMS).read_bytes()).hexdigest()


def model_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
