"""``WASW`` checkpoint files.

Layout::

    b"WASW" | version: u32 LE | header_len: u32 LE | header (UTF-8 JSON) |
    tensor payloads as float32 LE, in manifest order

The header records the architecture, the tensor manifest (name, shape,
role), the per-layer transform specs, the master and DOM seeds and the
optimizer step count.  Only plain weights, biases and (optionally)
momentum buffers are stored; shadow weights are always re-derived.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import FormatError
from .models import ArchitectureDef
from .transforms import TransformSpec

MAGIC = b"WASW"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    arch: ArchitectureDef
    params: dict[str, np.ndarray]
    specs: dict[str, TransformSpec]
    master_seed: int
    dom_seed: int = 0
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def header(self) -> dict[str, Any]:
        manifest = [{"name": k, "shape": list(v.shape), "role": "param"} for k, v in self.params.items()]
        manifest += [{"name": k, "shape": list(v.shape), "role": "velocity"} for k, v in self.velocity.items()]
        return {
            "architecture": self.arch.to_dict(),
            "manifest": manifest,
            "specs": {k: v.to_dict() for k, v in self.specs.items()},
            "master_seed": int(self.master_seed),
            "dom_seed": int(self.dom_seed),
            "step": int(self.step),
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
        for arr in list(self.params.values()) + list(self.velocity.values()):
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(chunks)

    def save(self, path: str | os.PathLike) -> None:
        data = self.to_bytes()
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size:
            raise FormatError("magic: file shorter than the fixed prefix")
        magic, version, head_len = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"magic: expected {MAGIC!r}, found {magic!r}")
        if version != VERSION:
            raise FormatError(f"version: unsupported format version {version}")
        start = _PREFIX.size
        if start + head_len > len(data):
            raise FormatError(f"header_len: {head_len} runs past end of file")
        try:
            head = json.loads(data[start:start + head_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"header: not valid JSON ({exc})") from None
        for key in ("architecture", "manifest", "specs", "master_seed", "dom_seed", "step"):
            if key not in head:
                raise FormatError(f"{key}: missing from header")
        try:
            arch = ArchitectureDef.from_dict(head["architecture"])
        except Exception as exc:
            raise FormatError(f"architecture: {exc}") from None
        try:
            specs = {k: TransformSpec.from_dict(v) for k, v in head["specs"].items()}
        except Exception as exc:
            raise FormatError(f"specs: {exc}") from None
        offset = start + head_len
        params: dict[str, np.ndarray] = {}
        velocity: dict[str, np.ndarray] = {}
        for i, entry in enumerate(head["manifest"]):
            try:
                name, shape, role = entry["name"], tuple(int(s) for s in entry["shape"]), entry["role"]
            except (KeyError, TypeError, ValueError):
                raise FormatError(f"manifest[{i}]: malformed entry {entry!r}") from None
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(data):
                raise FormatError(f"manifest[{i}] ({name}): payload truncated at byte {offset}")
            arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
            arr = arr.astype(np.float32)
            offset += nbytes
            if role == "param":
                params[name] = arr
            elif role == "velocity":
                velocity[name] = arr
            else:
                raise FormatError(f"manifest[{i}] ({name}): unknown role {role!r}")
        if offset != len(data):
            raise FormatError(f"manifest: {len(data) - offset} trailing bytes after last tensor")
        expected = {f"{pl.name}.{part}": shape for pl in arch.param_layers()
                    for part, shape in (("weight", pl.weight_shape), ("bias", (pl.weight_shape[0],)))}
        for name, shape in expected.items():
            if name not in params:
                raise FormatError(f"manifest: parameter {name} missing")
            if params[name].shape != tuple(shape):
                raise FormatError(f"manifest: {name} has shape {params[name].shape}, architecture wants {shape}")
        return cls(arch, params, specs, int(head["master_seed"]), int(head["dom_seed"]),
                   int(head["step"]), velocity, head.get("meta", {}))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
