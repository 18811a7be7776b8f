"""Checkpoint files: opaque weights plus a JSON metadata sidecar.

A checkpoint is two files: ``<name>.pt`` (serialized state dict) and
``<name>.json`` holding at least ``schema_version`` and ``role`` plus
whatever config the owning module needs to rebuild itself.  Loaders validate
both before touching the weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .report import json_safe

SCHEMA_VERSION = 1

__all__ = ["SCHEMA_VERSION", "save_checkpoint", "load_checkpoint", "sidecar_path"]


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: str | Path, state_dict: dict, meta: dict) -> Path:
    """Write weights and sidecar; ``meta`` must carry a ``role``."""
    if "role" not in meta:
        raise ValueError("checkpoint metadata needs a 'role'")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"schema_version": SCHEMA_VERSION, **meta}
    torch.save(state_dict, path)
    sidecar_path(path).write_text(json.dumps(json_safe(payload), indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path, expected_role: str | None = None):
    """Return ``(state_dict, meta)`` after validating the sidecar."""
    path = Path(path)
    side = sidecar_path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if not side.is_file():
        raise FileNotFoundError(f"checkpoint sidecar not found: {side}")
    meta = json.loads(side.read_text())
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"{path}: schema_version {version!r} unsupported (expected {SCHEMA_VERSION})"
        )
    if expected_role is not None and meta.get("role") != expected_role:
        raise ValueError(
            f"{path}: role {meta.get('role')!r}, expected {expected_role!r}"
        )
    state = torch.load(path, map_location="cpu", weights_only=True)
    return state, meta
