"""Run configuration: a versioned JSON file overlaid by CLI flags.

Schema (every key optional except ``version``)::

    {
      "version": 1,
      "data_dir": "/path/to/mnist",       # default: $SEQ_DATA_DIR
      "arch": "LAE-2",                    # LAE-2 | LAE-4 | CAE-4
      "seed": 0,                          # default seed for every stage
      "train":   {"learning_rate": 0.01, "batch_size": 64, "epochs": 20, "weight_init": "he"},
      "decoder": {"learning_rate": 0.001, "batch_size": 64, "epochs": 20, "weight_init": "he"},
      "kmeans":  {"K": 100, "init": "kmeanspp", "max_iter": 300, "tol": 1e-6, "restarts": 1, "refine": true,
                 "refine_rounds": 5},
      "k_grid": [10, 20, ..., 120],
      "sweep_seeds": [0],
      "epsilon": 0.01,
      "out": "runs/default",
      "threads": 1,
      "format": "pgm",
      "steps": 8,
      "train_limit": null,                # use only the first N training samples
      "test_limit": null
    }

A stage-level ``seed`` inside "train", "decoder" or "kmeans" overrides the
top-level one. The CAE-4 encoder defaults to 10 epochs instead of 20.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import nn
from .bundle import canonical_json
from .data import default_data_dir
from .errors import ConfigError
from .generator import decoder_train_config
from .quantizer import KmeansConfig

CONFIG_VERSION = 1
DEFAULT_K_GRID = list(range(10, 121, 10))

_TOP_KEYS = {
    "version", "data_dir", "arch", "seed", "train", "decoder", "kmeans", "k_grid", "sweep_seeds",
    "epsilon", "out", "threads", "format", "steps", "train_limit", "test_limit",
}
# keys that locate things rather than change results
_UNHASHED = {"data_dir", "out", "threads", "format"}


@dataclass
class RunConfig:
    arch: str = "LAE-2"
    seed: int = 0
    data_dir: Path | None = None
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    decoder: nn.TrainConfig = field(default_factory=decoder_train_config)
    kmeans: KmeansConfig = field(default_factory=lambda: KmeansConfig(K=100))
    k_grid: list = field(default_factory=lambda: list(DEFAULT_K_GRID))
    sweep_seeds: list = field(default_factory=lambda: [0])
    epsilon: float = 0.01
    out: Path = Path("runs/default")
    threads: int = 1
    format: str = "pgm"
    steps: int = 8
    train_limit: int | None = None
    test_limit: int | None = None

    def as_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "arch": self.arch,
            "seed": self.seed,
            "data_dir": str(self.data_dir) if self.data_dir else None,
            "train": dataclasses.asdict(self.train),
            "decoder": dataclasses.asdict(self.decoder),
            "kmeans": dataclasses.asdict(self.kmeans),
            "k_grid": list(self.k_grid),
            "sweep_seeds": list(self.sweep_seeds),
            "epsilon": self.epsilon,
            "out": str(self.out),
            "threads": self.threads,
            "format": self.format,
            "steps": self.steps,
            "train_limit": self.train_limit,
            "test_limit": self.test_limit,
        }

    def config_hash(self) -> str:
        d = {k: v for k, v in self.as_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(canonical_json(d)).hexdigest()

    def require_data_dir(self) -> Path:
        from .errors import DataError

        if self.data_dir is None:
            raise DataError("no dataset directory: pass --data-dir, set data_dir in the config, or set SEQ_DATA_DIR")
        if not self.data_dir.is_dir():
            raise DataError(f"dataset directory {self.data_dir} does not exist")
        return self.data_dir


def _stage(cls, defaults: dict, overrides: dict, seed: int, name: str):
    unknown = set(overrides) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    values = dict(defaults)
    values["seed"] = seed
    values.update(overrides)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] settings: {exc}") from exc


def build_config(raw: dict | None = None, **flags) -> RunConfig:
    """Merge a parsed config dict with flag overrides (``None`` flags are ignored)."""
    raw = dict(raw or {})
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    raw.update({k: v for k, v in flags.items() if v is not None})

    arch = raw.get("arch", "LAE-2")
    if arch not in nn.ARCHS:
        raise ConfigError(f"unknown arch {arch!r}; expected one of {nn.ARCHS}")
    seed = int(raw.get("seed", 0))
    if seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    train_defaults = dataclasses.asdict(nn.default_train_config(arch))
    dec_defaults = dataclasses.asdict(decoder_train_config())
    km_defaults = dataclasses.asdict(KmeansConfig(K=100))
    km_over = dict(raw.get("kmeans", {}))
    if raw.get("k") is not None:
        km_over["K"] = int(raw.pop("k"))
    cfg = RunConfig(
        arch=arch,
        seed=seed,
        train=_stage(nn.TrainConfig, train_defaults, raw.get("train", {}), seed, "train"),
        decoder=_stage(nn.TrainConfig, dec_defaults, raw.get("decoder", {}), seed, "decoder"),
        kmeans=_stage(KmeansConfig, km_defaults, km_over, seed, "kmeans"),
    )
    data_dir = raw.get("data_dir") or default_data_dir()
    cfg.data_dir = Path(data_dir) if data_dir else None
    k_grid = [int(k) for k in raw.get("k_grid", DEFAULT_K_GRID)]
    if not k_grid or any(b <= a for a, b in zip(k_grid, k_grid[1:])):
        raise ConfigError(f"k_grid must be non-empty and strictly ascending, got {k_grid}")
    cfg.k_grid = k_grid
    cfg.sweep_seeds = [int(s) for s in raw.get("sweep_seeds", [seed])]
    cfg.epsilon = float(raw.get("epsilon", 0.01))
    if not 0 <= cfg.epsilon < 1:
        raise ConfigError("epsilon must lie in [0, 1)")
    cfg.out = Path(raw.get("out", "runs/default"))
    cfg.threads = int(raw.get("threads", 1))
    cfg.format = raw.get("format", "pgm")
    if cfg.format not in ("pgm", "png"):
        raise ConfigError(f"format must be pgm or png, got {cfg.format!r}")
    cfg.steps = int(raw.get("steps", 8))
    cfg.train_limit = raw.get("train_limit")
    cfg.test_limit = raw.get("test_limit")
    return cfg


def load_config(path=None, **flags) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
    return build_config(raw, **flags)
