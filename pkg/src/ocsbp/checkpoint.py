"""OCPT checkpoints: named float32 parameters plus step counter and controller state."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ParameterStore

MAGIC = b"OCPT"
VERSION = 1
_FOOTER = struct.Struct("<Qdd")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict  # name -> float32 ndarray, in file order
    step: int
    beta: float
    ema_error: float

    @classmethod
    def from_store(cls, store: ParameterStore, step: int, beta: float, ema_error: float | None) -> "Checkpoint":
        params = {name: np.asarray(p.data, dtype=np.float32) for name, p in store}
        ema = math.nan if ema_error is None else float(ema_error)
        return cls(params, int(step), float(beta), ema)

    def apply(self, store: ParameterStore) -> None:
        """Copy values into ``store``; names and shapes must match exactly."""
        missing = sorted(set(store.names()) - set(self.params))
        extra = sorted(set(self.params) - set(store.names()))
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, p in store:
            value = self.params[name]
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape}, model shape {p.shape}")
            p.data = value.astype(p.data.dtype)
            p.reset_state()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(ckpt.params))]
    for name, value in ckpt.params.items():
        raw_name = name.encode("utf-8")
        value = np.asarray(value, dtype="<f4")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        out.append(np.ascontiguousarray(value).tobytes())
    out.append(_FOOTER.pack(ckpt.step, ckpt.beta, ckpt.ema_error))
    return b"".join(out)


def decode_checkpoint(raw: bytes, path="<bytes>") -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}, needed {size} more")
        values = struct.unpack_from(fmt, raw, pos)
        pos += size
        return values

    version, count = take("<BI")
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, this reader supports {VERSION}")
    params = {}
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated parameter name at byte {pos}")
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        (flat,) = take(f"<{int(np.prod(shape, dtype=np.int64)) * 4}s")
        params[name] = np.frombuffer(flat, dtype="<f4").reshape(shape).astype(np.float32)
    step, beta, ema = take("<Qdd")
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(params, step, beta, ema)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)
