"""Checkpoint directories: parameter blob, optimizer blob and a JSON sidecar."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .tensor import ParamStore, read_tensor_file, write_tensor_file
from .training import Optimizer

PARAMS_FILE = "params.cbdc"
OPTIMIZER_FILE = "optimizer.cbdc"
META_FILE = "meta.json"


@dataclass
class Checkpoint:
    params: ParamStore
    optimizer_state: dict = field(default_factory=dict)
    optimizer_kind: str = "adagrad"
    config: dict = field(default_factory=dict)
    step: int = 0


def save_checkpoint(path, params: ParamStore, optimizer: Optimizer | None = None, config: dict | None = None,
                    step: int = 0) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params.save(path / PARAMS_FILE)
    if optimizer is not None:
        write_tensor_file(path / OPTIMIZER_FILE, optimizer.state_arrays())
    meta = {"step": step, "optimizer": optimizer.kind if optimizer else None, "config": config or {}}
    (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not (path / PARAMS_FILE).exists():
        raise FileNotFoundError(f"no checkpoint at {path} (missing {PARAMS_FILE})")
    params = ParamStore.load(path / PARAMS_FILE)
    meta = json.loads((path / META_FILE).read_text()) if (path / META_FILE).exists() else {}
    opt = read_tensor_file(path / OPTIMIZER_FILE) if (path / OPTIMIZER_FILE).exists() else {}
    return Checkpoint(params, opt, meta.get("optimizer") or "adagrad", meta.get("config", {}), meta.get("step", 0))
