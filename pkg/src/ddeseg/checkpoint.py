"""Model checkpoints: the "DDCK1" binary container.

Layout: magic, u32 version, u32 config length + config JSON, then named
parameter tensors (u32 name length, name bytes, u32 rank, u32 dims,
little-endian float32 data), trailing CRC32 of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np
import torch

from .config import RunConfig
from .errors import DataFormatError
from .model import DDESegModel

MAGIC = b"DDCK1\x00\x00\x00"
VERSION = 1


def save_checkpoint(model: DDESegModel, path) -> None:
    config_blob = model.config.to_json().encode()
    payload = struct.pack("<2I", VERSION, len(config_blob)) + config_blob
    state = model.state_dict()
    payload += struct.pack("<I", len(state))
    for name, tensor in state.items():
        name_b = name.encode()
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        payload += struct.pack("<I", len(name_b)) + name_b
        payload += struct.pack("<I", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> DDESegModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    payload, (crc_stored,) = blob[len(MAGIC) : -4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise DataFormatError(f"{path}: CRC mismatch")
    version, cfg_len = struct.unpack_from("<2I", payload, 0)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    off = 8
    try:
        config = RunConfig.from_json(payload[off : off + cfg_len].decode())
        off += cfg_len
        (num_tensors,) = struct.unpack_from("<I", payload, off)
        off += 4
        state = {}
        for _ in range(num_tensors):
            (name_len,) = struct.unpack_from("<I", payload, off)
            off += 4
            name = payload[off : off + name_len].decode()
            off += name_len
            (rank,) = struct.unpack_from("<I", payload, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", payload, off) if rank else ()
            off += 4 * rank
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, "<f4", count, off).reshape(shape).copy()
            off += 4 * count
            state[name] = torch.from_numpy(arr)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: truncated payload") from exc
    if off != len(payload):
        raise DataFormatError(f"{path}: trailing bytes in payload")
    model = DDESegModel(config)
    model.load_state_dict(state)
    return model
