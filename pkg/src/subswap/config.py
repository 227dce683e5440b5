"""Run configuration: a JSON file and command-line flags over the same keys.

Every config-file key has exactly one flag spelling (``null_iters`` and
``--null-iters``), unknown keys are rejected, and a flag given on the
command line wins over the file's value.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any

from .attention import SwapSchedule
from .errors import ConfigError, StorageError


def parse_schedule(text: str) -> SwapSchedule:
    """Parse ``"10,25,20"`` into a swap schedule (phi, M, A)."""
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 3:
        raise ConfigError(f"schedule needs three comma-separated integers, got {text!r}")
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"schedule values must be integers, got {text!r}") from exc
    return SwapSchedule(*values)


def parse_values(text: str) -> list[int]:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ConfigError("values must be a comma-separated integer list")
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"values must be integers, got {text!r}") from exc


@dataclasses.dataclass
class RunConfig:
    """Resolved settings for one command invocation."""

    backend: str = "toy"
    out: str = "out"
    seed: int = 0
    steps: int = 50
    guidance: float = 7.5
    schedule: str = "10,25,20"
    swap_branches: str = "both"
    prompt: str | None = None
    subject: str | None = None
    concept: str | None = None
    concept_file: str | None = None
    image: str | None = None
    inversion: str | None = None
    bank: str | None = None
    bank_out: str | None = None
    null_iters: int = 10
    null_lr: float = 1e-2
    axis: str | None = None
    values: str | None = None
    template: str | None = None
    train_steps: int = 200
    train_lr: float = 5e-4
    train_batch: int = 4
    ref_seed: int = 0
    ref_count: int = 4
    components: int = 4

    provided: frozenset[str] = dataclasses.field(default_factory=frozenset, compare=False)

    def swap_schedule(self) -> SwapSchedule:
        return parse_schedule(self.schedule)

    def require(self, *keys: str) -> None:
        for key in keys:
            if getattr(self, key) in (None, ""):
                raise ConfigError(f"missing required setting {key!r}")


_FIELDS = {
    f.name: f for f in dataclasses.fields(RunConfig) if f.name != "provided"
}

_INT_KEYS = {
    "seed", "steps", "null_iters", "train_steps", "train_batch",
    "ref_seed", "ref_count", "components",
}
_FLOAT_KEYS = {"guidance", "null_lr", "train_lr"}


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        return None
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a JSON config file, rejecting unknown keys."""
    file_path = Path(path)
    if not file_path.is_file():
        raise StorageError(f"config file not found: {file_path}")
    try:
        raw = json.loads(file_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config file {file_path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {file_path} must hold a JSON object")
    for key in raw:
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
    return {key: _coerce(key, value) for key, value in raw.items()}


def resolve_config(
    file_values: dict[str, Any] | None, flag_values: dict[str, Any]
) -> RunConfig:
    """Layer defaults, then the config file, then explicit flags."""
    merged: dict[str, Any] = {}
    provided: set[str] = set()
    if file_values:
        for key, value in file_values.items():
            if value is not None:
                merged[key] = value
                provided.add(key)
    for key, value in flag_values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown setting {key!r}")
        if value is not None:
            merged[key] = _coerce(key, value)
            provided.add(key)
    cfg = RunConfig(**merged, provided=frozenset(provided))
    if cfg.steps < 1:
        raise ConfigError(f"steps must be >= 1, got {cfg.steps}")
    if cfg.guidance < 0:
        raise ConfigError(f"guidance must be >= 0, got {cfg.guidance}")
    if cfg.null_iters < 0:
        raise ConfigError(f"null_iters must be >= 0, got {cfg.null_iters}")
    if cfg.null_lr <= 0:
        raise ConfigError(f"null_lr must be > 0, got {cfg.null_lr}")
    if cfg.swap_branches not in ("both", "cond"):
        raise ConfigError(
            f"swap_branches must be 'both' or 'cond', got {cfg.swap_branches!r}"
        )
    cfg.swap_schedule()
    return cfg
