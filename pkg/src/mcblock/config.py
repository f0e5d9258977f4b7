"""Plain-text ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key has a default, so an
empty file is a valid config. Values given on the command line override the
file.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Tuple

from . import bench

OUTPUT_DIR_ENV = "MCBLOCK_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "mcblock_out"
COMPOSITE_PREFIX = "composite"


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR


HELP = {
    "image": "input image path (PNG/PPM) or 'composite[:SIZE]' for the synthetic benchmark image",
    "strategy": "sampler for train: random, active, coarse_to_fine, mcblock, mcblock-wo_<part>",
    "strategies": "comma-separated strategy list for bench (the first one is the speedup reference)",
    "iterations": "training iterations (0 runs initialization only)",
    "seed": "random seed; identical seeds give identical metrics",
    "output_dir": f"directory for all outputs (default ${OUTPUT_DIR_ENV} or '{DEFAULT_OUTPUT_DIR}')",
    "checkpoint_every": "iterations between metric checkpoints",
    "target_psnr": "PSNR (dB) for the iterations-to-target summary",
    "batch_size": "blocks per training batch",
    "learning_rate": "optimizer step size",
    "optimizer": "sgd, normalized or adam",
    "beta1": "adam first-moment decay",
    "beta2": "adam second-moment decay",
    "adam_eps": "adam denominator epsilon",
    "lam": "staleness temperature: U grows by exp(O / lam)",
    "eps_init": "color-variance threshold of the initial bottom-up merge",
    "eps_L": "relative loss threshold for pruning",
    "eps_C": "color-variance threshold for pruning",
    "min_block_side": "blocks split along an axis only while that side exceeds this",
    "max_redraws": "draws per batch slot before a duplicate block is accepted",
    "renormalize_log": "rebase stored priorities once the lazy log-scale exceeds this",
    "recompute_every": "iterations between exact recomputations of the mean leaf loss",
}


@dataclass(frozen=True)
class Config:
    image: str = COMPOSITE_PREFIX
    strategy: str = "mcblock"
    strategies: Tuple[str, ...] = ("random", "mcblock")
    iterations: int = 2000
    seed: int = 0
    output_dir: str = field(default_factory=default_output_dir)
    checkpoint_every: int = 100
    target_psnr: float = 30.0
    batch_size: int = 1024
    learning_rate: float = 1.0
    optimizer: str = "normalized"
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    lam: float = 5000.0
    eps_init: float = 1e-3
    eps_L: float = 1e-2
    eps_C: float = 1e-4
    min_block_side: int = 1
    max_redraws: int = 8
    renormalize_log: float = 50.0
    recompute_every: int = 1000

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.strategies:
            raise ValueError("strategies must not be empty")
        for s in (self.strategy,) + tuple(self.strategies):
            bench.parse_strategy(s)
        self.train_config()

    def train_config(self) -> bench.TrainConfig:
        names = {f.name for f in fields(bench.TrainConfig)}
        return bench.TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def with_overrides(self, overrides: Dict[str, str]) -> "Config":
        return replace(self, **{k: _convert(k, v) for k, v in overrides.items()})


FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _convert(key: str, raw):
    if key not in FIELD_TYPES:
        raise ValueError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {kind}, got {raw!r}") from None
    if kind.startswith("Tuple"):
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return raw


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"{source}:{n}: expected 'key = value', got {line.rstrip()!r}")
        key, value = (p.strip() for p in text.split("=", 1))
        if key not in FIELD_TYPES:
            raise ValueError(f"{source}:{n}: unknown config key {key!r}")
        if key in out:
            raise ValueError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def parse(text: str, source: str = "<config>") -> Config:
    return Config().with_overrides(parse_pairs(text.splitlines(), source))


def load(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    return parse(text, str(path))


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        lines.append(f"# {HELP[f.name]}")
        lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def save(cfg: Config, path) -> None:
    Path(path).write_text(serialize(cfg))
