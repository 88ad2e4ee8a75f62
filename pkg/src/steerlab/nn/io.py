"""STEERTENSOR v1 files: one ASCII header line, then little-endian float32 data."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ValidationError

MAGIC = "STEERTENSOR"


def save_tensor(path: str | Path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    header = " ".join([MAGIC, "1", "f32", str(x.ndim), *map(str, x.shape)]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(x.tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if len(header) < 4 or header[0] != MAGIC or header[1] != "1" or header[2] != "f32":
        raise ValidationError(f"{path}: not a STEERTENSOR v1 f32 file")
    rank = int(header[3])
    shape = tuple(int(s) for s in header[4 : 4 + rank])
    if len(shape) != rank:
        raise ValidationError(f"{path}: header rank {rank} but {len(shape)} dims")
    x = np.frombuffer(payload, dtype="<f4")
    if x.size != int(np.prod(shape, dtype=np.int64)):
        raise ValidationError(f"{path}: payload has {x.size} floats, header says {shape}")
    return x.reshape(shape).astype(np.float32)
