"""Checkpoint containers and metrics-CSV helpers.

A checkpoint is one torch file holding the config that produced it, both
hashes, the step index, and state dicts for models and optimizers. Saves go
through a temp file and rename so a crash never leaves a half-written
checkpoint behind.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import torch

from .config import RunConfig, arch_fingerprint, config_hash

REQUIRED_KEYS = ("kind", "config", "config_hash", "arch_hash", "step",
                 "models", "optimizers")


def save_checkpoint(path, *, kind: str, cfg: RunConfig, step: int,
                    models: dict, optimizers: dict | None = None) -> None:
    payload = {
        "kind": kind,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "arch_hash": arch_fingerprint(cfg, kind),
        "step": step,
        "models": {name: m.state_dict() for name, m in models.items()},
        "optimizers": optimizers or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, *, kind: str | None = None,
                    expect_config: RunConfig | None = None,
                    expect_arch: RunConfig | None = None) -> dict:
    """Load and validate a checkpoint.

    ``expect_config`` demands the exact configuration (resuming the same
    run); ``expect_arch`` only demands weight compatibility (using another
    stage's output).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise RuntimeError(f"checkpoint {path} is unreadable: {e}")
    if not isinstance(payload, dict) or any(k not in payload
                                            for k in REQUIRED_KEYS):
        raise RuntimeError(f"checkpoint {path} is missing required fields")
    if kind is not None and payload["kind"] != kind:
        raise RuntimeError(f"checkpoint {path} has kind {payload['kind']!r}, "
                           f"expected {kind!r}")
    if expect_config is not None:
        want = config_hash(expect_config)
        if payload["config_hash"] != want:
            raise RuntimeError(
                f"checkpoint {path} was written under config hash "
                f"{payload['config_hash']}, current config hashes to {want}; "
                f"refusing to resume across configs")
    if expect_arch is not None:
        want = arch_fingerprint(expect_arch, payload["kind"])
        if payload["arch_hash"] != want:
            raise RuntimeError(
                f"checkpoint {path} has architecture fingerprint "
                f"{payload['arch_hash']}, current config needs {want}")
    return payload


# ---------------------------------------------------------------------------
# metrics CSV

def append_metrics_csv(path, rows, fieldnames) -> None:
    """Append rows, writing the header only when creating the file."""
    if not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        if fresh:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_metrics_csv(path) -> list[dict]:
    """Rows with numeric fields parsed back to int/float where possible."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no metrics file at {path}")
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
    return out


def truncate_metrics_csv(path, max_step: int) -> None:
    """Drop rows past a step, for resuming from an older checkpoint."""
    path = Path(path)
    if not path.exists():
        return
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fieldnames = reader.fieldnames
        kept = [row for row in reader if int(row["step"]) <= max_step]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in kept:
            writer.writerow(row)
