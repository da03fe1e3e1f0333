"""Run configuration: ``section.key = value`` lines resolved over typed defaults.

Precedence, lowest first: built-in defaults, config file, ``VPE_*``
environment variables, command-line flags. ``VPE_TRAIN_LR=1e-3`` sets
``train.lr``; the first underscore after the prefix separates the section.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping

from vpe.data.benchmark import BenchmarkConfig
from vpe.errors import ConfigError
from vpe.model import VpeConfig
from vpe.train import TrainConfig

ENV_PREFIX = "VPE_"


@dataclass
class RunOptions:
    preset: str = "paper"        # paper | toy: base for the model section
    data: str = ""
    out: str = ""
    checkpoint: str = ""
    holdout: float = 0.2         # held-out fraction of each seen class's reals
    top_k: int = 100
    rows: int = 8
    keep_best: bool = False


SECTIONS = {"model": VpeConfig, "train": TrainConfig, "data": BenchmarkConfig, "run": RunOptions}
_DEFAULTS = {name: cls() for name, cls in SECTIONS.items()}


def _parse(key: str, raw: str, default):
    raw = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(tuple(int(v) for v in part.split("x")) for part in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(f"{c}x{k}" for c, k in value)
    return repr(value) if isinstance(value, float) else str(value)


def known_keys() -> list[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in fields(cls)]


class RunConfig:
    """Explicit overrides on top of section defaults; resolves lazily."""

    def __init__(self):
        self.overrides: dict[str, object] = {}
        self.sources: dict[str, str] = {}

    def set(self, key: str, value, source: str = "flag") -> None:
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section)
        if cls is None or name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {key!r} (from {source})")
        default = getattr(_DEFAULTS[section], name)
        self.overrides[key] = value if not isinstance(value, str) or isinstance(default, str) \
            else _parse(key, value, default)
        self.sources[key] = source

    def load_text(self, text: str, source: str) -> None:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            self.set(key.strip(), value.strip(), f"{source}:{lineno}")

    def load_file(self, path: str | Path) -> None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        self.load_text(text, str(path))

    def load_env(self, environ: Mapping[str, str] | None = None) -> None:
        environ = os.environ if environ is None else environ
        for var in sorted(environ):
            if not var.startswith(ENV_PREFIX):
                continue
            section, _, name = var[len(ENV_PREFIX):].lower().partition("_")
            self.set(f"{section}.{name}", environ[var], f"env {var}")

    def section(self, name: str):
        if name == "model":
            preset = self.section("run").preset
            if preset not in ("paper", "toy"):
                raise ConfigError(f"run.preset must be paper or toy, got {preset!r}")
            base = VpeConfig.toy() if preset == "toy" else VpeConfig()
        else:
            base = SECTIONS[name]()
        changes = {k.split(".", 1)[1]: v for k, v in self.overrides.items() if k.startswith(name + ".")}
        try:
            return replace(base, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {name}: {exc}") from exc

    def model(self) -> VpeConfig:
        cfg = self.section("model")
        cfg.validate()
        return cfg

    def train(self) -> TrainConfig:
        cfg = self.section("train")
        cfg.validate()
        return cfg

    def data(self) -> BenchmarkConfig:
        cfg = self.section("data")
        cfg.validate()
        return cfg

    def run(self) -> RunOptions:
        return self.section("run")

    def to_text(self, sections=tuple(SECTIONS)) -> str:
        lines = []
        for name in sections:
            resolved = self.section(name)
            for f in fields(resolved):
                lines.append(f"{name}.{f.name} = {_format(getattr(resolved, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, sections=tuple(SECTIONS), name: str = "config.txt") -> Path:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(sections))
        return path


def resolve(config_file: str | None = None, flags: Mapping[str, object] | None = None,
            environ: Mapping[str, str] | None = None) -> RunConfig:
    """Apply file, environment and flag layers in order."""
    rc = RunConfig()
    if config_file:
        rc.load_file(config_file)
    rc.load_env(environ)
    for key, value in (flags or {}).items():
        if value is not None:
            rc.set(key, value, "flag")
    return rc
