"""Versioned checkpoint files shared by all trainable modules.

A checkpoint is a torch-serialized dict carrying a format version, a kind
tag, the builder config and the state dict, so any checkpoint can be
reloaded without external context.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Missing, mismatched or structurally invalid checkpoint."""


def save_checkpoint(path, kind: str, config: dict, state: dict, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": kind,
            "config": config,
            "state": state,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"not a scenediff checkpoint: {path}")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {payload['format_version']} in {path}"
        )
    if expected_kind is not None and payload["kind"] != expected_kind:
        raise CheckpointError(
            f"expected '{expected_kind}' checkpoint, found '{payload['kind']}' in {path}"
        )
    return payload


def file_checksum(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
