"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"MEMN" | version | record*

    record = name_len | name (utf-8) | rank | extent*rank | float64 LE payload

Record names are namespaced: ``config/<section.field>`` (rank-0 scalars),
``meta/iteration``, ``meta/seed``, ``param/<name>``, ``adam/t``, then
``adam/m/<name>``, ``adam/v/<name>`` and ``adam/step/<name>`` per parameter.
Records are written in a fixed order so that save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParseError, VersionError
from ..network import StageNetwork, parameter_shapes
from .config import ExperimentConfig, config_from_items, config_items
from .optim import AdamState

MAGIC = b"MEMN"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    iteration: int = 0
    seed: int = 0

    @classmethod
    def from_network(cls, config: ExperimentConfig, net: StageNetwork, adam=None, iteration=0, seed=None):
        params = {k: np.array(t.data) for k, t in net.params.items()}
        adam = adam if adam is not None else AdamState.zeros(params)
        return cls(config, params, adam, iteration, config.train.seed if seed is None else seed)

    def network(self) -> StageNetwork:
        from ..arraydiff import Tensor

        expected = parameter_shapes(self.config.net)
        if set(expected) != set(self.params):
            raise VersionError("checkpoint parameters do not match its network config")
        return StageNetwork(self.config.net, {k: Tensor(self.params[k], requires_grad=True) for k in expected})

    def records(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"config/{k}", np.array(float(v))) for k, v in config_items(self.config)]
        out.append(("meta/iteration", np.array(float(self.iteration))))
        out.append(("meta/seed", np.array(float(self.seed))))
        names = list(parameter_shapes(self.config.net))
        out.extend((f"param/{k}", self.params[k]) for k in names)
        out.append(("adam/t", np.array(float(self.adam.t))))
        for k in names:
            if k in self.adam.m:
                out.append((f"adam/m/{k}", self.adam.m[k]))
                out.append((f"adam/v/{k}", self.adam.v[k]))
                out.append((f"adam/step/{k}", np.array(float(self.adam.steps.get(k, 0)))))
        return out


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    for name, arr in ckpt.records():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(_U32.pack(len(key)))
        parts.append(key)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(n) for n in arr.shape)
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_records(raw: bytes) -> list[tuple[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise ParseError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    if len(raw) < 8:
        raise ParseError("truncated checkpoint header", offset=len(raw))
    (version,) = _U32.unpack_from(raw, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    pos = 8
    records = []

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ParseError("truncated checkpoint record", offset=pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (name_len,) = _U32.unpack(take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = _U32.unpack(take(4))
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        records.append((name, arr))
    return records


def decode(raw: bytes) -> Checkpoint:
    records = decode_records(raw)
    config_values = {}
    params, m, v, steps = {}, {}, {}, {}
    meta = {}
    for name, arr in records:
        section, _, rest = name.partition("/")
        if section == "config":
            config_values[rest] = float(arr)
        elif section == "meta":
            meta[rest] = int(arr)
        elif section == "param":
            params[rest] = arr
        elif name == "adam/t":
            meta["adam_t"] = int(arr)
        elif name.startswith("adam/m/"):
            m[name[len("adam/m/"):]] = arr
        elif name.startswith("adam/v/"):
            v[name[len("adam/v/"):]] = arr
        elif name.startswith("adam/step/"):
            steps[name[len("adam/step/"):]] = int(arr)
        else:
            raise ParseError(f"unknown checkpoint record {name!r}")
    try:
        config = config_from_items(config_values)
    except Exception as exc:
        raise VersionError(f"checkpoint config is incompatible: {exc}") from exc
    expected = parameter_shapes(config.net)
    for k, shape in expected.items():
        if k not in params or params[k].shape != shape:
            raise VersionError(f"checkpoint parameter {k} missing or mis-shaped for its config")
    return Checkpoint(config, params, AdamState(meta.get("adam_t", 0), m, v, steps), meta.get("iteration", 0), meta.get("seed", 0))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
