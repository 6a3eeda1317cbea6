"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic     8 bytes   b"ABMLCKPT"
    version   u16
    header    u32 length + UTF-8 JSON  {"model": <ModelConfig>, "meta": {...}}
    count     u32
    tensors   count x [u16 name_len, name, u8 dtype_len, dtype, u8 ndim,
                       ndim x u64 dims, u64 nbytes, payload]
    checksum  32 bytes  SHA-256 of everything above

Tensors are streamed in and out one at a time so that large presets never
need two serialised copies in memory.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from os import PathLike
from typing import Any, BinaryIO

import numpy as np
import torch

from ..errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .config import ModelConfig
from .modules import MaskedLM

MAGIC = b"ABMLCKPT"
VERSION = 1
_DIGEST = 32
_CHUNK = 1 << 22

_DTYPES = {
    "float16": torch.float16,
    "bfloat16": torch.bfloat16,
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class _HashingWriter:
    def __init__(self, fh: BinaryIO):
        self.fh = fh
        self.sha = hashlib.sha256()

    def write(self, data) -> None:
        self.sha.update(data)
        self.fh.write(data)


def _le_bytes(t: torch.Tensor) -> memoryview:
    t = t.detach().cpu().contiguous()
    if t.dtype == torch.bfloat16:
        arr = t.view(torch.int16).numpy()
    else:
        arr = t.numpy()
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return memoryview(np.ascontiguousarray(arr).reshape(-1).view(np.uint8))


def save_checkpoint(model: MaskedLM, path: str | PathLike,
                    metadata: dict[str, Any] | None = None) -> None:
    header = json.dumps({"model": model.config.to_dict(), "meta": metadata or {}},
                        sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    state = model.state_dict()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        w = _HashingWriter(fh)
        w.write(MAGIC)
        w.write(struct.pack("<H", VERSION))
        w.write(struct.pack("<I", len(header)))
        w.write(header)
        w.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            name_b = name.encode("utf-8")
            dtype_b = _DTYPE_NAMES[tensor.dtype].encode("ascii")
            payload = _le_bytes(tensor)
            w.write(struct.pack("<H", len(name_b)) + name_b)
            w.write(struct.pack("<B", len(dtype_b)) + dtype_b)
            w.write(struct.pack("<B", tensor.dim()))
            w.write(struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
            w.write(struct.pack("<Q", payload.nbytes))
            w.write(payload)
        fh.write(w.sha.digest())
    os.replace(tmp, path)


def _verify_checksum(path: str | PathLike) -> int:
    size = os.path.getsize(path)
    minimum = len(MAGIC) + 2 + 4 + 4 + _DIGEST
    if size < minimum:
        raise CheckpointTruncatedError(f"{path}: file is {size} bytes, shorter than any checkpoint")
    sha = hashlib.sha256()
    body = size - _DIGEST
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
        fh.seek(0)
        left = body
        while left:
            chunk = fh.read(min(_CHUNK, left))
            if not chunk:
                raise CheckpointTruncatedError(f"{path}: unexpected end of file")
            sha.update(chunk)
            left -= len(chunk)
        stored = fh.read(_DIGEST)
    if sha.digest() != stored:
        raise CheckpointChecksumError(f"{path}: checksum mismatch (file corrupt or truncated)")
    return body


class _Reader:
    def __init__(self, fh: BinaryIO, limit: int, path):
        self.fh, self.limit, self.path = fh, limit, path

    def read(self, n: int) -> bytes:
        if self.fh.tell() + n > self.limit:
            raise CheckpointTruncatedError(f"{self.path}: record runs past end of data")
        return self.fh.read(n)

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def read_header(path: str | PathLike) -> dict[str, Any]:
    """Config and metadata block, without loading tensors or verifying the checksum."""
    with open(path, "rb") as fh:
        r = _Reader(fh, os.path.getsize(path), path)
        return _read_header(r)


def _read_header(r: _Reader) -> dict[str, Any]:
    if r.read(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{r.path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"{r.path}: format version {version}, expected {VERSION}")
    (n,) = r.unpack("<I")
    try:
        return json.loads(r.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{r.path}: unreadable header: {exc}") from None


def load_checkpoint(path: str | PathLike, return_metadata: bool = False):
    """Load ``(model, config)`` or ``(model, config, metadata)``."""
    body = _verify_checksum(path)
    with open(path, "rb") as fh:
        r = _Reader(fh, body, path)
        header = _read_header(r)
        config = ModelConfig.from_dict(header["model"])
        with torch.device("meta"):
            model = MaskedLM(config)
        model.to_empty(device="cpu")
        state = model.state_dict()
        (count,) = r.unpack("<I")
        seen = set()
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.read(nlen).decode("utf-8")
            (dlen,) = r.unpack("<B")
            dtype_name = r.read(dlen).decode("ascii")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}Q") if ndim else ()
            (nbytes,) = r.unpack("<Q")
            if name not in state or dtype_name not in _DTYPES:
                raise CheckpointFormatError(f"{path}: unexpected tensor {name!r} ({dtype_name})")
            dtype = _DTYPES[dtype_name]
            buf = bytearray(r.read(nbytes))
            if dtype == torch.bfloat16:
                tensor = torch.frombuffer(buf, dtype=torch.int16).view(torch.bfloat16)
            else:
                np_dtype = np.dtype(str(dtype).removeprefix("torch.")).newbyteorder("<")
                tensor = torch.from_numpy(np.frombuffer(buf, dtype=np_dtype).astype(np_dtype.newbyteorder("=")))
            tensor = tensor.reshape(shape)
            target = state[name]
            if tuple(target.shape) != tuple(shape):
                raise CheckpointFormatError(f"{path}: tensor {name!r} has shape {shape}, expected {tuple(target.shape)}")
            if target.dtype != dtype:
                # Keep the stored dtype: materialise the parameter with it.
                _set_tensor(model, name, tensor.clone())
            else:
                with torch.no_grad():
                    target.copy_(tensor)
            seen.add(name)
        missing = set(state) - seen
        if missing:
            raise CheckpointFormatError(f"{path}: missing tensors {sorted(missing)[:5]}")
    model.eval()
    if return_metadata:
        return model, config, header.get("meta", {})
    return model, config


def _set_tensor(model: torch.nn.Module, name: str, value: torch.Tensor) -> None:
    *parents, leaf = name.split(".")
    mod = model
    for p in parents:
        mod = getattr(mod, p)
    old = getattr(mod, leaf)
    if isinstance(old, torch.nn.Parameter):
        setattr(mod, leaf, torch.nn.Parameter(value, requires_grad=old.requires_grad))
    else:
        mod.register_buffer(leaf, value)
