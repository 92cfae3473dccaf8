"""Checkpoint serialization.

Layout: an 8-byte magic, a format version, the model configuration as JSON,
then every parameter as a named block of little-endian float32 with its
declared shape. Loading rebuilds the parameter structure from the embedded
config and refuses files whose block names or shapes disagree with it, so a
checkpoint can never be silently loaded into the wrong architecture.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from typing import Tuple

import numpy as np

from . import tensor as tl
from .model import ConfigError, ModelConfig, Params, init_params

MAGIC = b"GRIDLOOP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable files or config/shape mismatches."""


def save_checkpoint(path, params: Params, config: ModelConfig) -> None:
    config_json = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    named = list(params.named())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(config_json)))
        fh.write(config_json)
        fh.write(struct.pack("<I", len(named)))
        for name, tensor in named:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Tuple[Params, ModelConfig]:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, config_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        try:
            config = ModelConfig(**json.loads(_read_exact(fh, config_len, "config")))
        except (json.JSONDecodeError, TypeError, ConfigError) as err:
            raise CheckpointError(f"invalid embedded config: {err}") from err
        params = init_params(config, seed=0)
        expected = list(params.named())
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "block count"))
        if count != len(expected):
            raise CheckpointError(f"checkpoint has {count} parameter blocks, "
                                  f"config implies {len(expected)}")
        for expected_name, tensor in expected:
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if name != expected_name:
                raise CheckpointError(f"parameter block {name!r} where "
                                      f"{expected_name!r} was expected")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            if shape != tensor.data.shape:
                raise CheckpointError(f"{name}: stored shape {shape} does not "
                                      f"match config shape {tensor.data.shape}")
            raw = _read_exact(fh, 4 * int(np.prod(shape, dtype=np.int64)), name)
            tensor.data = np.frombuffer(raw, dtype="<f4").reshape(shape) \
                .astype(tl.default_dtype())
        if fh.read(1):
            raise CheckpointError("trailing bytes after final parameter block")
    return params, config
