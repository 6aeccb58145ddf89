"""Run configuration: layered defaults <- config file <- explicit overrides.

One structured file (YAML or JSON) with per-subcommand sections; the RAV_SEED
environment variable overrides the seed from any source.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from .errors import ContractViolation


@dataclass
class BenchSettings:
    warmup_iters: int = 5
    timed_iters: int = 50
    batch_size: int = 1
    resolution: int = 128

    def validate(self):
        if self.warmup_iters < 1:
            raise ContractViolation("warmup_iters must be >= 1")
        if self.timed_iters < 10:
            raise ContractViolation("timed_iters must be >= 10")
        if self.batch_size < 1 or self.resolution < 1:
            raise ContractViolation("batch size and resolution must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"          # opaque hint, echoed into reports
    dataset_dir: str | None = None
    run_dir: str | None = None
    datasim: dict = field(default_factory=dict)
    align: dict = field(default_factory=dict)
    restore: dict = field(default_factory=dict)
    avatar: dict = field(default_factory=dict)
    bench: BenchSettings = field(default_factory=BenchSettings)

    def validate(self, require_paths: tuple = ()):
        self.bench.validate()
        for name in require_paths:
            value = getattr(self, name)
            if value is None:
                raise ContractViolation(f"config field {name} is required")
            if not Path(value).exists():
                raise ContractViolation(f"config path {name}={value} does not resolve")

    def to_dict(self) -> dict:
        return asdict(self)


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Precedence: explicit overrides > config file > dataclass defaults."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
        if not isinstance(data, dict):
            raise ContractViolation("config file must hold a mapping")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    bench = data.pop("bench", {})
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**data)
    if isinstance(bench, dict):
        cfg.bench = BenchSettings(**bench)
    if "RAV_SEED" in os.environ:
        cfg.seed = int(os.environ["RAV_SEED"])
    return cfg
