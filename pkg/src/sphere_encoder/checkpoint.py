"""Checkpoint archives.

Layout (a standard ``.npz`` zip container, readable without this package)::

    __meta__            uint8 array holding UTF-8 JSON:
                          {"format": "sphere-encoder-checkpoint", "version": 1,
                           "model_config": {...}, "step": int, "seed": int|null,
                           "extra": {...}}
    param/<name>        one ``.npy`` member per model parameter, dtype '<f4'
    optim/<i>/<key>     optional optimizer state tensors, dtype '<f4'
    state/<name>        optional auxiliary arrays (e.g. the current epoch order)

Every ``.npy`` member carries its own dtype/shape header. Archives are read with
``allow_pickle=False``.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .exceptions import ConfigMismatch, CorruptCheckpoint
from .network import ModelConfig, SphereAutoencoder

FORMAT = "sphere-encoder-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    model: SphereAutoencoder
    config: ModelConfig
    step: int = 0
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None
    arrays: dict = field(default_factory=dict)


def _f4(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype("<f4")


def save_checkpoint(path, model: SphereAutoencoder, step: int = 0, seed: Optional[int] = None,
                    extra: Optional[dict] = None, optimizer_state: Optional[dict] = None,
                    arrays: Optional[dict] = None) -> Path:
    path = Path(path)
    extra = dict(extra or {})
    if optimizer_state is not None:
        extra["optimizer_param_groups"] = optimizer_state["param_groups"]
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "step": int(step),
        "seed": seed,
        "extra": extra,
    }
    members = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in model.state_dict().items():
        members[f"param/{name}"] = _f4(p)
    if optimizer_state is not None:
        for idx, st in optimizer_state["state"].items():
            for key, value in st.items():
                members[f"optim/{idx}/{key}"] = _f4(torch.as_tensor(value))
    for name, arr in (arrays or {}).items():
        members[f"state/{name}"] = np.asarray(arr)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **members)
    tmp.replace(path)
    return path


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> Checkpoint:
    """Load an archive; ``config``, when given, must equal the stored config."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            members = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, EOFError, OSError, KeyError) as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in members:
        raise CorruptCheckpoint(f"{path} has no metadata member")
    try:
        meta = json.loads(members.pop("__meta__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path} has unreadable metadata") from exc
    if meta.get("format") != FORMAT:
        raise CorruptCheckpoint(f"{path} is not a sphere-encoder checkpoint")
    if meta.get("version") != VERSION:
        raise CorruptCheckpoint(f"{path} has format version {meta.get('version')}, expected {VERSION}")

    stored = ModelConfig.from_dict(meta["model_config"])
    if config is not None and config != stored:
        diff = {k: (v, stored.to_dict()[k]) for k, v in config.to_dict().items() if stored.to_dict()[k] != v}
        raise ConfigMismatch(f"checkpoint config differs from requested config: {diff}")

    model = SphereAutoencoder(stored)
    state = model.state_dict()
    params = {k[len("param/"):]: v for k, v in members.items() if k.startswith("param/")}
    if set(params) != set(state):
        missing = sorted(set(state) - set(params))
        raise CorruptCheckpoint(f"{path} parameter set does not match the model (missing {missing[:5]})")
    for name, arr in params.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CorruptCheckpoint(f"parameter {name} has shape {arr.shape}, expected {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)

    extra = dict(meta.get("extra", {}))
    optimizer_state = None
    optim = {k[len("optim/"):]: v for k, v in members.items() if k.startswith("optim/")}
    if optim or "optimizer_param_groups" in extra:
        per_param: dict = {}
        for key, arr in optim.items():
            idx, name = key.split("/", 1)
            per_param.setdefault(int(idx), {})[name] = torch.from_numpy(arr.astype(np.float32))
        optimizer_state = {"state": per_param, "param_groups": extra.pop("optimizer_param_groups")}
    arrays = {k[len("state/"):]: v for k, v in members.items() if k.startswith("state/")}
    return Checkpoint(model, stored, meta.get("step", 0), meta.get("seed"), extra, optimizer_state, arrays)
