"""Binary checkpoint format.

Layout: magic "HVFI", little-endian u32 version, a length-prefixed UTF-8
JSON header listing model config, step counter and (name, dtype, shape) per
tensor, then the raw little-endian float32 payload in header order. The
optimizer state, when present, follows as a second header + payload of the
same form. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HVFI"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, malformed header, or truncated file."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the expected shape."""


@dataclass
class Checkpoint:
    version: int
    config: dict
    params: dict                     # name -> float32 ndarray
    opt_state: dict = field(default_factory=dict)
    step: int = 0


def _write_section(fh, header: dict, arrays):
    header_bytes = json.dumps(header).encode("utf-8")
    fh.write(struct.pack("<I", len(header_bytes)))
    fh.write(header_bytes)
    for _, arr in arrays:
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, size, what):
    buf = fh.read(size)
    if len(buf) != size:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def _read_section(fh):
    raw = fh.read(4)
    if not raw:
        return None, None
    if len(raw) != 4:
        raise CheckpointFormatError("truncated checkpoint while reading header size")
    (hlen,) = struct.unpack("<I", raw)
    try:
        header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"malformed checkpoint header: {e}") from e
    arrays = {}
    for name, dtype, shape in header["tensors"]:
        if dtype != "f4":
            raise CheckpointFormatError(f"unsupported dtype {dtype!r} for {name}")
        count = int(np.prod(shape)) if shape else 1
        buf = _read_exact(fh, count * 4, f"tensor {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return header, arrays


def save_checkpoint(path, config: dict, named_params, opt_arrays=None, step=0):
    """named_params/opt_arrays: iterables of (name, ndarray)."""
    path = Path(path)
    named_params = [(n, np.asarray(a)) for n, a in named_params]
    header = {
        "config": config,
        "step": int(step),
        "tensors": [[n, "f4", list(a.shape)] for n, a in named_params],
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_section(fh, header, named_params)
        if opt_arrays is not None:
            opt_arrays = [(n, np.asarray(a)) for n, a in opt_arrays]
            opt_header = {"tensors": [[n, "f4", list(a.shape)] for n, a in opt_arrays]}
            _write_section(fh, opt_header, opt_arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointFormatError(
                f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {version} not supported (expected {VERSION})")
        header, params = _read_section(fh)
        if header is None:
            raise CheckpointFormatError("missing parameter section")
        opt_header, opt_arrays = _read_section(fh)
    return Checkpoint(version=version, config=header.get("config", {}),
                      params=params, opt_state=opt_arrays or {},
                      step=int(header.get("step", 0)))


def apply_params(module, params: dict):
    """Load a name->array dict into a module, verifying names and shapes."""
    for name, p in module.named_parameters():
        if name not in params:
            raise CheckpointShapeError(f"checkpoint missing tensor {name}")
        arr = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointShapeError(
                f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(p.data.shape)}")
        p.data = arr.astype(p.data.dtype).copy()
