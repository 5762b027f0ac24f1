"""Binary checkpoint container shared by victims and REDRL bundles.

Layout::

    b"ADVCKPT\\0"                 8-byte magic
    u32 format version            little-endian
    u32 header length H
    H bytes of UTF-8 JSON         header: metadata + section/tensor table
    float32 LE parameter blob     tensors concatenated in table order
    8-byte BLAKE2b digest         over every preceding byte

A header section lists ``(key, shape)`` pairs; the blob holds the tensors of
every section back to back, in order. Non-float state (e.g. BatchNorm's
``num_batches_tracked`` counter) is not stored.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ADVCKPT\0"
FORMAT_VERSION = 1


class CorruptionError(Exception):
    """A stored checksum does not match the bytes on disk."""


def digest64(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def float_state(module: torch.nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Canonical ordered float tensors of a module (parameters and buffers)."""
    return OrderedDict(
        (k, v.detach()) for k, v in module.state_dict().items() if v.is_floating_point()
    )


def state_blob(state) -> bytes:
    return b"".join(
        np.ascontiguousarray(v.cpu().numpy(), dtype="<f4").tobytes() for v in state.values()
    )


def state_checksum(module: torch.nn.Module) -> str:
    """Hex SHA-256 of the module's canonical float32 blob."""
    return hashlib.sha256(state_blob(float_state(module))).hexdigest()


def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save(path, sections: dict[str, torch.nn.Module], meta: dict) -> str:
    """Write ``sections`` (name -> module) with ``meta`` in the header.

    Returns the hex file digest.
    """
    table, blobs = [], []
    for name, module in sections.items():
        state = float_state(module)
        table.append({"name": name,
                      "tensors": [[k, list(v.shape)] for k, v in state.items()]})
        blobs.append(state_blob(state))
    header = json.dumps({"meta": meta, "sections": table}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    digest = digest64(body)
    atomic_write(Path(path), body + digest)
    return digest.hex()


def read(path) -> tuple[dict, dict[str, "OrderedDict[str, torch.Tensor]"]]:
    """Verify and parse a checkpoint into ``(meta, {section: state_dict})``."""
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:8] != MAGIC:
        raise CorruptionError(f"{path}: not a checkpoint file")
    body, digest = raw[:-8], raw[-8:]
    if digest64(body) != digest:
        raise CorruptionError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 8)
    if version != FORMAT_VERSION:
        raise CorruptionError(f"{path}: unsupported format version {version}")
    header = json.loads(body[16:16 + hlen])
    blob = np.frombuffer(body, dtype="<f4", offset=16 + hlen)
    sections, pos = {}, 0
    for sec in header["sections"]:
        state = OrderedDict()
        for key, shape in sec["tensors"]:
            n = int(np.prod(shape, dtype=np.int64))
            state[key] = torch.from_numpy(blob[pos:pos + n].copy()).reshape(shape)
            pos += n
        sections[sec["name"]] = state
    if pos != blob.size:
        raise CorruptionError(f"{path}: blob length does not match header")
    return header["meta"], sections


def load_into(module: torch.nn.Module, state) -> None:
    missing = [k for k in float_state(module) if k not in state]
    if missing:
        raise KeyError(f"checkpoint lacks tensors {missing[:3]}...")
    module.load_state_dict(state, strict=False)
