"""Run configuration shared by the CLI subcommands.

Values resolve in precedence order: explicit CLI flag, then JSON config
file, then the built-in default. The CLI passes flag values of None for
anything the user did not type, so resolution is a simple fill-forward.
"""

from __future__ import annotations

import dataclasses
import json
import os

from .errors import ValidationError

ENV_THREADS = "ANTERISEG_THREADS"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    specular_threshold: int = 240
    specular_dilate: int = 5
    telea_radius: int = 3
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    canny_sigma: float = 1.4
    canny_low: float = 50.0
    canny_high: float = 150.0
    hue_low: float = 20.0
    hue_high: float = 340.0
    sat_min: float = 0.3
    val_min: float = 0.2
    train_frac: float = 0.85
    variants: int = 3
    tau: float = 0.5
    overlay_alpha: float = 0.4

    def __post_init__(self):
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")
        if not 0.0 < self.train_frac < 1.0:
            raise ValidationError(f"train_frac must be in (0, 1), got {self.train_frac}")
        if self.variants < 1:
            raise ValidationError(f"variants must be >= 1, got {self.variants}")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def load_config_file(path) -> dict:
    """Read a JSON config file holding a flat dict of RunConfig fields."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def thread_cap() -> int | None:
    """Worker cap from the environment, or None when unset."""
    raw = os.environ.get(ENV_THREADS)
    if raw is None or raw.strip() == "":
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ValidationError(f"{ENV_THREADS} must be an integer, got {raw!r}")
    if cap < 1:
        raise ValidationError(f"{ENV_THREADS} must be >= 1, got {cap}")
    return cap


def resolve_config(cli_values: dict, config_path=None) -> RunConfig:
    """Merge CLI flags over a config file over defaults.

    cli_values maps RunConfig field names to the parsed flag value, with
    None meaning "not given". The thread count from the environment caps
    whatever the merge produced."""
    merged = {}
    if config_path is not None:
        merged.update(load_config_file(config_path))
    for key, value in cli_values.items():
        if key not in _FIELDS:
            raise ValidationError(f"unknown config field {key!r}")
        if value is not None:
            merged[key] = value
    cfg = RunConfig(**merged)
    cap = thread_cap()
    if cap is not None and cfg.threads > cap:
        cfg = dataclasses.replace(cfg, threads=cap)
    return cfg
