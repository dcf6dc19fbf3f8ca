"""Binary checkpoints and run manifests.

Checkpoint layout (all integers little-endian)::

    b"RLCK" | u32 version | u64 header_len | header (UTF-8 JSON)
    then per tensor: u32 name_len | name | u8 dtype | u32 rank | u64 * rank extents | payload

The JSON header holds the network spec, free-form metadata and the tensor
count. dtype tags: 1 = float32, 2 = float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from collections import OrderedDict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import FormatError
from .models import NetworkSpec, ParameterStore, expected_names
from .tensor import Tensor

MAGIC = b"RLCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def encode_checkpoint(params: ParameterStore, metadata: Optional[dict] = None) -> bytes:
    header = json.dumps({"spec": params.spec.to_dict(), "metadata": metadata or {},
                         "tensors": len(params)}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    for name, t in params.items():
        arr = t.data
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> Tuple[ParameterStore, dict]:
    if raw[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<IQ", raw, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(raw[pos: pos + hlen].decode("utf-8"))
        pos += hlen
        spec = NetworkSpec.from_dict(header["spec"])
        tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for _ in range(int(header["tensors"])):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos: pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", raw, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            dt = _DTYPES.get(tag)
            if dt is None:
                raise FormatError(f"unknown dtype tag {tag} for tensor {name!r}")
            nbytes = int(np.prod(shape)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise FormatError(f"tensor {name!r} truncated at offset {pos}")
            arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape)
            pos += nbytes
            tensors[name] = Tensor(arr.astype(dt.newbyteorder("="), copy=True),
                                   requires_grad=not ParameterStore.is_buffer(name))
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last tensor")
    if list(tensors) != expected_names(spec):
        raise FormatError("checkpoint tensor names do not match its network spec")
    return ParameterStore(spec, tensors), header["metadata"]


def save_checkpoint(path, params: ParameterStore, metadata: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, metadata))


def load_checkpoint(path) -> Tuple[ParameterStore, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_digest(params: ParameterStore) -> str:
    return hashlib.sha256(encode_checkpoint(params)).hexdigest()


# -- run manifests --------------------------------------------------------------------
def file_sha256(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    if p.is_dir():
        for child in sorted(p.rglob("*")):
            if child.is_file():
                h.update(str(child.relative_to(p)).encode())
                h.update(file_sha256(child).encode())
        return h.hexdigest()
    with open(p, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDirectory:
    """Append-only output directory that records what a command wrote."""

    def __init__(self, root, command: str, config: dict, seed: Optional[int]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs: dict = {}
        self.outputs: List[str] = []
        self.started = time.time()

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.exists():
            raise FileExistsError(f"{p} already exists; run directories are append-only")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def add_input(self, path) -> None:
        if path is not None and Path(path).exists():
            self.inputs[str(path)] = file_sha256(path)

    def manifest_path(self) -> Path:
        i = 0
        while True:
            name = "manifest.json" if i == 0 else f"manifest-{i}.json"
            p = self.root / name
            if not p.exists():
                return p
            i += 1

    def finish(self, extra: Optional[dict] = None) -> Path:
        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time": time.time() - self.started,
        }
        if extra:
            manifest.update(extra)
        p = self.manifest_path()
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
        return p


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
