"""RDT1 tensor files and PFN1 model checkpoints.

RDT1 layout (little-endian)::

    b"RDT1" | u32 ndim | u32 dims[ndim] | u8 dtype tag | payload

dtype tags: 1 = complex64 stored as interleaved float32 (re, im),
2 = float32, 3 = float64. Payload is row-major.

PFN1 layout (little-endian)::

    b"PFN1" | u32 n | n bytes of UTF-8 JSON config (sorted keys)
           | u32 count | count x (u16 len | UTF-8 name | RDT1 record)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

RDT_MAGIC = b"RDT1"
PFN_MAGIC = b"PFN1"
_TAGS = {np.dtype(np.complex64): 1, np.dtype(np.float32): 2, np.dtype(np.float64): 3}
_DTYPES = {v: k for k, v in _TAGS.items()}


class FormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.complex128:
        arr = arr.astype(np.complex64)
    if arr.dtype not in _TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = RDT_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + struct.pack("<B", _TAGS[arr.dtype])
    return header + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def _need(buf, pos, n, what):
    if pos + n > len(buf):
        raise FormatError(f"truncated file: {what} needs {n} bytes at byte offset {pos}, only {len(buf) - pos} left")


def decode_tensor(buf: bytes, pos: int = 0):
    """Decode one RDT1 record starting at ``pos``; return (array, end offset)."""
    _need(buf, pos, 4, "magic")
    if buf[pos:pos + 4] != RDT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[pos:pos + 4])!r} at byte offset {pos}")
    pos += 4
    _need(buf, pos, 4, "ndim")
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    _need(buf, pos, 4 * ndim, "dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    _need(buf, pos, 1, "dtype tag")
    tag = buf[pos]
    pos += 1
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag} at byte offset {pos - 1}")
    dtype = _DTYPES[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    _need(buf, pos, nbytes, "payload")
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize, offset=pos)
    return arr.astype(dtype).reshape(dims), pos + nbytes


def save_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor at byte offset {end}")
    return arr


def encode_checkpoint(config: dict, tensors: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [PFN_MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, encode_tensor(arr)]
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Return (config dict, ordered {name: array})."""
    _need(buf, 0, 4, "magic")
    if buf[:4] != PFN_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r} at byte offset 0")
    _need(buf, 4, 4, "config length")
    (n,) = struct.unpack_from("<I", buf, 4)
    _need(buf, 8, n, "config block")
    config = json.loads(buf[8:8 + n].decode())
    pos = 8 + n
    _need(buf, pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        _need(buf, pos, 2, "name length")
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        _need(buf, pos, ln, "name")
        name = buf[pos:pos + ln].decode()
        pos += ln
        tensors[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes at byte offset {pos}")
    return config, tensors


def save_checkpoint(path, model, optimizer=None, extra: dict | None = None) -> int:
    """Write a PFN1 checkpoint of ``model`` (and Adam moments if given); return the byte size."""
    config = {"network": model.config.to_dict(), "dtype": str(model.dtype)}
    if extra:
        config["extra"] = extra
    tensors = dict(model.state_dict())
    if optimizer is not None and optimizer.m:
        config["optimizer"] = {"step": optimizer.step, "lr": optimizer.lr, "beta1": optimizer.beta1,
                               "beta2": optimizer.beta2, "eps": optimizer.eps}
        names = [name for name, p in model.named_parameters() if p.requires_grad]
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = v
    buf = encode_checkpoint(config, tensors)
    Path(path).write_bytes(buf)
    return len(buf)


def load_checkpoint(path):
    """Rebuild the model (and optimizer state if stored) from a PFN1 file."""
    from .network import FusionNet, NetworkConfig
    from .optim import AdamState

    config, tensors = decode_checkpoint(Path(path).read_bytes())
    model = FusionNet(NetworkConfig(**config["network"]), dtype=np.dtype(config.get("dtype", "float32")))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    optimizer = None
    if "optimizer" in config:
        o = config["optimizer"]
        names = [name for name, p in model.named_parameters() if p.requires_grad]
        optimizer = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
                              m=[tensors[f"adam.m.{n}"].copy() for n in names],
                              v=[tensors[f"adam.v.{n}"].copy() for n in names])
    return model, optimizer, config
