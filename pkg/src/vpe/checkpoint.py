"""VPEC checkpoint container.

Layout (little-endian):

    b"VPEC"  u32 version
    u32 length, config text (UTF-8 "key = value" lines)
    u32 count, then count parameter records
    u32 count, then count optimizer records ("m/<name>", "v/<name>")

A record is: u32 name length, name bytes, u32 rank, rank x u32 extents,
raw float32 data in C order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from vpe.errors import DataError
from vpe.model import VPE, VpeConfig
from vpe.nn import AdamState

MAGIC = b"VPEC"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    model: VPE
    adam: AdamState | None = None
    iteration: int = 0
    seed: int | None = None
    rng_state: dict = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def config(self) -> VpeConfig:
        return self.model.config


# -- config text ---------------------------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(f"{c}x{k}" for c, k in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_to_text(config: VpeConfig) -> list[str]:
    return [f"model.{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(config)]


def config_from_pairs(pairs: dict[str, str]) -> VpeConfig:
    defaults = VpeConfig()
    kwargs = {}
    for f in fields(VpeConfig):
        raw = pairs.get(f"model.{f.name}")
        if raw is None:
            continue
        default = getattr(defaults, f.name)
        if isinstance(default, tuple):
            kwargs[f.name] = tuple(tuple(int(v) for v in part.split("x")) for part in raw.split(","))
        elif isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        else:
            kwargs[f.name] = type(default)(raw)
    return VpeConfig(**kwargs)


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise DataError(f"malformed checkpoint config line {line!r}")
        pairs[key.strip()] = value
    return pairs


# -- records ---------------------------------------------------------------------

def _write_records(fh, records: dict[str, np.ndarray]) -> None:
    fh.write(_U32.pack(len(records)))
    for name, value in records.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        fh.write(_U32.pack(len(raw)) + raw + _U32.pack(arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def records(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
            count = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return out


# -- public API ---------------------------------------------------------------------

def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename). Float64 models are stored as float32."""
    path = Path(path)
    lines = config_to_text(ckpt.config)
    lines.append(f"train.iteration = {ckpt.iteration}")
    if ckpt.seed is not None:
        lines.append(f"train.seed = {ckpt.seed}")
    for name, state in ckpt.rng_state.items():
        lines.append(f"rng.{name} = {json.dumps(state, sort_keys=True)}")
    optim: dict[str, np.ndarray] = {}
    if ckpt.adam is not None:
        a = ckpt.adam
        lines += [f"adam.lr = {a.lr!r}", f"adam.beta1 = {a.beta1!r}", f"adam.beta2 = {a.beta2!r}",
                  f"adam.epsilon = {a.epsilon!r}", f"adam.step_count = {a.step_count}"]
        for name in sorted(a.first_moment):
            optim[f"m/{name}"] = a.first_moment[name]
            optim[f"v/{name}"] = a.second_moment[name]
    for key, value in ckpt.meta.items():
        if "\n" in str(value):
            raise ValueError(f"meta value for {key!r} must be a single line")
        lines.append(f"meta.{key} = {value}")
    text = ("\n".join(lines) + "\n").encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + _U32.pack(VERSION) + _U32.pack(len(text)) + text)
        _write_records(fh, ckpt.model.state_dict())
        _write_records(fh, optim)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a VPEC checkpoint")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pairs = parse_text(r.take(r.u32()).decode("utf-8"))
    params = r.records()
    optim = r.records()
    if r.pos != len(data):
        raise DataError(f"{path}: trailing bytes after checkpoint records")

    model = VPE(config_from_pairs(pairs), seed=0)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    adam = None
    if "adam.lr" in pairs:
        adam = AdamState(float(pairs["adam.lr"]), float(pairs["adam.beta1"]),
                         float(pairs["adam.beta2"]), float(pairs["adam.epsilon"]),
                         int(pairs["adam.step_count"]))
        for key, value in optim.items():
            kind, _, name = key.partition("/")
            (adam.first_moment if kind == "m" else adam.second_moment)[name] = value
    rng_state = {k[4:]: json.loads(v) for k, v in pairs.items() if k.startswith("rng.")}
    meta = {k[5:]: v for k, v in pairs.items() if k.startswith("meta.")}
    seed = int(pairs["train.seed"]) if "train.seed" in pairs else None
    return Checkpoint(model, adam, int(pairs.get("train.iteration", 0)), seed, rng_state, meta)
