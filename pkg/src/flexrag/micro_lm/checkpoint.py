"""Binary checkpoint file: magic "FXRG", little-endian, bit-exact round trip."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointError
from .config import ModelConfig

MAGIC = b"FXRG"
FORMAT_VERSION = 1

_DTYPE_CODES = {"<f4": 0, "<f8": 1, "<i4": 2, "<i8": 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    format_version: int
    config: ModelConfig
    parameters: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]
    rng_state: bytes = b""
    stage_tag: str = "pretrained"
    meta: dict = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr)
    key = a.dtype.newbyteorder("<").str
    if key not in _DTYPE_CODES:
        a = a.astype("<f8")
        key = "<f8"
    a = a.astype(key, copy=False)
    out = [_pack_str(name), struct.pack("<BB", _DTYPE_CODES[key], a.ndim)]
    out.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
    out.append(a.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        out = self.data[self.off: self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self) -> tuple[str, np.ndarray]:
        name = self.string()
        code, ndim = struct.unpack("<BB", self.take(2))
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
        dt = np.dtype(_CODE_DTYPES[code])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "config": ckpt.config.to_dict(),
        "stage_tag": ckpt.stage_tag,
        "meta": ckpt.meta,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(meta_raw)), meta_raw,
             struct.pack("<I", len(ckpt.rng_state)), ckpt.rng_state]
    names_p = sorted(ckpt.parameters)
    names_o = sorted(ckpt.optimizer_state)
    parts.append(struct.pack("<II", len(names_p), len(names_o)))
    for name in names_p:
        parts.append(_pack_array(name, ckpt.parameters[name]))
    for name in names_o:
        parts.append(_pack_array(name, ckpt.optimizer_state[name]))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {version} != {FORMAT_VERSION}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    rng_state = r.take(r.u32())
    n_params, n_opt = struct.unpack("<II", r.take(8))
    parameters = dict(r.array() for _ in range(n_params))
    optimizer_state = dict(r.array() for _ in range(n_opt))
    return Checkpoint(
        format_version=version,
        config=ModelConfig.from_dict(meta["config"]),
        parameters=parameters,
        optimizer_state=optimizer_state,
        rng_state=rng_state,
        stage_tag=meta["stage_tag"],
        meta=meta["meta"],
    )
