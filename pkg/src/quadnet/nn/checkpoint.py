"""Binary checkpoint of the two towers.

Layout (little endian): b"QNET1", u8 tower count, u32 D, then for each tower
and each parameter in PARAM_ORDER: u8 name length, name, u8 rank, u32 dims,
float32 data.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..tensor import Tensor
from .model import PARAM_ORDER, EmbedderParams

MAGIC = b"QNET1"


class CheckpointError(ValueError):
    pass


def dumps(params_t: EmbedderParams, params_r: EmbedderParams) -> bytes:
    if params_t.dim != params_r.dim:
        raise ValueError("towers disagree on embedding dimension")
    parts = [MAGIC, struct.pack("<BI", 2, params_t.dim)]
    for tower in (params_t, params_r):
        for name in PARAM_ORDER:
            data = tower[name].data
            raw = name.encode("ascii")
            parts.append(struct.pack("<B", len(raw)) + raw)
            parts.append(struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape))
            parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params_t: EmbedderParams, params_r: EmbedderParams, path) -> None:
    Path(path).write_bytes(dumps(params_t, params_r))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes, expected_dim: int | None = None) -> tuple[EmbedderParams, EmbedderParams]:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    count, dim = r.unpack("<BI")
    if count != 2:
        raise CheckpointError(f"expected 2 towers, found {count}")
    if expected_dim is not None and dim != expected_dim:
        raise CheckpointError(f"checkpoint has D={dim}, configuration expects D={expected_dim}")
    towers = []
    for _ in range(count):
        tensors = {}
        for expected in PARAM_ORDER:
            (nlen,) = r.unpack("<B")
            name = r.take(nlen).decode("ascii", errors="replace")
            if name != expected:
                raise CheckpointError(f"expected parameter {expected}, found {name!r}")
            (rank,) = r.unpack("<B")
            shape = r.unpack(f"<{rank}I")
            count_f = int(np.prod(shape))
            data = np.frombuffer(r.take(4 * count_f), dtype="<f4").reshape(shape)
            tensors[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
        tower = EmbedderParams(tensors)
        if tower.dim != dim:
            raise CheckpointError(f"fc2 output {tower.dim} disagrees with header D={dim}")
        towers.append(tower)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return towers[0], towers[1]


def load_checkpoint(path, expected_dim: int | None = None) -> tuple[EmbedderParams, EmbedderParams]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf, expected_dim)
