"""Single-file checkpoint format for all trained modules.

Layout (little-endian): magic 'LBWC', u8 version, u32 json meta length,
meta bytes, u32 param count, then per parameter a u16 name length, the
utf-8 name, u8 ndim, ndim u32 dims, and raw float32 data. Meta carries the
model kind, its config dict, the train step, and free-form extras.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

MAGIC = b"LBWC"
VERSION = 1

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(path, module: torch.nn.Module, kind: str, config, step: int = 0, extra: dict | None = None):
    meta = {
        "kind": kind,
        "config": config.to_dict() if hasattr(config, "to_dict") else dict(config),
        "step": int(step),
        "extra": extra or {},
    }
    blob = json.dumps(meta, separators=(",", ":")).encode()
    state = module.state_dict()
    parts = [MAGIC, _U8.pack(VERSION), _U32.pack(len(blob)), blob, _U32.pack(len(state))]
    for name, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        nb = name.encode()
        parts.append(_U16.pack(len(nb)))
        parts.append(nb)
        parts.append(_U8.pack(arr.ndim))
        for d in arr.shape:
            parts.append(_U32.pack(d))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict:
    """Returns {'kind', 'config', 'step', 'extra', 'state_dict'}."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        if buf[:4] != MAGIC:
            raise CheckpointFormatError(f"bad magic {buf[:4]!r}")
        (version,) = _U8.unpack_from(buf, 4)
        if version != VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        (mlen,) = _U32.unpack_from(buf, 5)
        off = 9
        meta = json.loads(buf[off : off + mlen].decode())
        off += mlen
        (count,) = _U32.unpack_from(buf, off)
        off += 4
        state = {}
        for _ in range(count):
            (nlen,) = _U16.unpack_from(buf, off)
            off += 2
            name = buf[off : off + nlen].decode()
            off += nlen
            (ndim,) = _U8.unpack_from(buf, off)
            off += 1
            shape = []
            for _ in range(ndim):
                (d,) = _U32.unpack_from(buf, off)
                off += 4
                shape.append(d)
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            state[name] = torch.from_numpy(arr.copy())
        if off != len(buf):
            raise CheckpointFormatError(f"{len(buf) - off} trailing bytes")
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointFormatError(f"corrupt checkpoint: {e}") from None
    return {
        "kind": meta["kind"],
        "config": meta["config"],
        "step": meta["step"],
        "extra": meta.get("extra", {}),
        "state_dict": state,
    }


def load_module(path, expect_kind: str | None = None):
    """Rebuild the right module class from a checkpoint file."""
    from lbw.model import ModelConfig, TwoExpertModel, WorldModel

    ck = load_checkpoint(path)
    if expect_kind and ck["kind"] != expect_kind:
        raise CheckpointFormatError(f"expected a {expect_kind} checkpoint, found {ck['kind']}")
    if ck["kind"] in ("teacher", "adapted"):
        module = TwoExpertModel(ModelConfig.from_dict(ck["config"]))
    elif ck["kind"] == "student":
        module = WorldModel(ModelConfig.from_dict(ck["config"]))
    elif ck["kind"] == "agent":
        from lbw.agent import AgentConfig, BehaviorCloner

        module = BehaviorCloner(AgentConfig.from_dict(ck["config"]))
    else:
        raise CheckpointFormatError(f"unknown checkpoint kind {ck['kind']!r}")
    module.load_state_dict(ck["state_dict"])
    module.eval()
    return module, ck
