"""Shared configuration with fixed precedence.

One JSON config file carries per-stage sections; any leaf can be overridden
by an environment variable (SCENEDIFF_<SECTION>_<KEY>) and both by an
explicit CLI flag. Precedence: CLI flag > env var > config file > default.
"""

from __future__ import annotations

import json
import os
from pathlib import Path


class ConfigError(ValueError):
    pass


ENV_PREFIX = "SCENEDIFF"

DEFAULTS = {
    "shared": {
        "class_count": 6,
        "image_size": 64,
        "embed_dim": 256,
        "seed": 0,
    },
    "data": {
        "frames_per_video": 32,
        "train_videos": 8,
        "val_videos": 2,
        "test_videos": 2,
        "shapes_min": 0,
        "shapes_max": 3,
    },
    "codecs": {
        "downsample_image": 2,
        "downsample_mask": 1,
        "latent_channels": 8,
        "codebook_size": 256,
        "base_channels": 32,
        "epochs": 12,
        "batch_size": 32,
        "lr": 2e-3,
    },
    "pretraining": {
        "local_epochs": 10,
        "global_epochs": 40,
        "batch_size": 16,
        "lr": 1e-3,
        "negatives": 7,
        "hidden_dim": 128,
        "gnn_layers": 3,
    },
    "diffusion": {
        "mode": "pixel",
        "steps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "epochs": 20,
        "batch_size": 16,
        "lr": 2e-4,
        "ema_decay": 0.999,
        "drop_prob": 0.2,
        "omega": 2.0,
        "base_channels": 32,
    },
    "evaluation": {
        "detector_epochs": 14,
        "diversity_pairs": 200,
    },
    "service": {
        "host": "127.0.0.1",
        "port": 8000,
        "timeout_s": 300.0,
        "max_batch": 16,
    },
}


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object of sections")
    return data


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from '{raw}'")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def resolve_option(
    section: str,
    key: str,
    cli_value=None,
    config: dict | None = None,
    env: dict | None = None,
):
    """Effective value of `section.key` under the fixed precedence order."""
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown option {section}.{key}")
    default = DEFAULTS[section][key]
    if cli_value is not None:
        return cli_value
    env = os.environ if env is None else env
    env_key = f"{ENV_PREFIX}_{section.upper()}_{key.upper()}"
    if env_key in env:
        return _coerce(env[env_key], default)
    if config and section in config and key in config[section]:
        value = config[section][key]
        if type(default) is not type(value) and not (
            isinstance(default, float) and isinstance(value, int)
        ):
            raise ConfigError(
                f"config {section}.{key} should be {type(default).__name__}, "
                f"got {type(value).__name__}"
            )
        return float(value) if isinstance(default, float) else value
    return default


def resolve_section(section: str, config: dict | None = None, env: dict | None = None, **cli):
    """All options of a section resolved at once; kwargs are CLI overrides."""
    return {
        key: resolve_option(section, key, cli.get(key), config, env)
        for key in DEFAULTS[section]
    }
