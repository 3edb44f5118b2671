"""Run configuration: defaults, YAML file, then command-line overrides."""
from __future__ import annotations

import copy
import re
from pathlib import Path

import yaml

from .highway_sim import config_hash  # noqa: F401  (re-exported for the CLI)


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` as a float, not a string."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)

DEFAULTS: dict = {
    "seed": 0,
    "workdir": "runs/default",
    "data": {"scenes": 5000, "keep_k": 4, "gap_fraction": 0.3},
    "vqvae": {"steps": 16000, "lr": 3e-3, "batch_size": 128, "K": 64, "L": 4, "D": 8, "beta": 0.25},
    "pixelcnn": {"steps": 3000, "lr": 1e-3, "batch_size": 128, "channels": 64, "layers": 4},
    "filter": {"steps": 300, "train_iters": 20, "rho": 1.0, "margin": 0.2, "gamma_init": 0.5, "items": 2000,
               "batch_size": 32, "lr": 1e-3, "violation_weight": 10.0},
    "evaluate": {"episodes": 50, "seeds": [0, 1], "densities": [1.0, 1.5, 2.5, 3.0],
                 "speed_limit": 15.0, "episode_steps": 400, "samples": 1000, "filter_iters": 100,
                 "temperature": 1.0, "sample_sweep": [], "iters_sweep": [], "sweep_density": 2.5,
                 "no_filter_densities": [], "workers": 1},
}

# (section, key) -> (low, high) inclusive ranges checked after merging
RANGES = {
    ("data", "scenes"): (1, 10**7), ("data", "keep_k"): (1, 156), ("data", "gap_fraction"): (0.0, 1.0),
    ("vqvae", "steps"): (1, 10**7), ("vqvae", "K"): (2, 4096), ("vqvae", "L"): (1, 64), ("vqvae", "D"): (1, 256),
    ("pixelcnn", "steps"): (1, 10**7), ("filter", "steps"): (0, 10**7), ("filter", "train_iters"): (1, 1000),
    ("filter", "rho"): (1e-6, 1e6), ("filter", "margin"): (0.0, 1.0), ("filter", "gamma_init"): (0.05, 0.99),
    ("evaluate", "episodes"): (1, 10**6),
    ("evaluate", "samples"): (1, 10**6), ("evaluate", "filter_iters"): (1, 10**5),
    ("evaluate", "episode_steps"): (10, 10**6), ("evaluate", "temperature"): (0.0, 100.0),
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_assignment(text: str) -> tuple[list[str], object]:
    """``section.key=value`` with the value parsed as YAML scalar/list."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), _yaml(raw)


def set_path(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {'.'.join(path)}: {part} is not a section")
    node[path[-1]] = value


def load_config(path: str | None = None, overrides: list[str] | None = None, flags: dict | None = None) -> dict:
    """Merge defaults, the YAML file at ``path`` and overrides (later wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = _yaml(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = deep_merge(cfg, loaded)
    for text in overrides or []:
        set_path(cfg, *parse_assignment(text))
    for dotted, value in (flags or {}).items():
        if value is not None:
            set_path(cfg, dotted.split("."), value)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for (section, key), (lo, hi) in RANGES.items():
        v = cfg[section].get(key)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not lo <= v <= hi:
            raise ConfigError(f"{section}.{key}={v!r} outside [{lo}, {hi}]")

