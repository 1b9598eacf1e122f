"""Versioned little-endian checkpoint of tensors, optimizer moments and the subspace.

Layout: magic ``SPCK``, u32 format version, u32 entry count, then per entry
u16 name length, UTF-8 name, u8 dtype code, u8 ndim, u32 per dimension and
the raw little-endian data.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import ProtocolError
from ..model import ModelParams
from ..optim import ROW_CONSTANT, STANDARD, OptimState
from ..subspace import Subspace

MAGIC = b"SPCK"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}
_MODES = {STANDARD: 0, ROW_CONSTANT: 1}


def save_checkpoint(path, tensors: dict) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise ProtocolError(f"cannot store dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ProtocolError("not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ProtocolError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (size,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2: pos + 2 + size].decode("utf-8")
            pos += 2 + size
            code, ndim = struct.unpack_from("<BB", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 2)
            pos += 2 + 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise ProtocolError(f"checkpoint truncated inside {name}")
            out[name] = np.frombuffer(buf, dt, int(np.prod(shape, dtype=np.int64)), pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise ProtocolError(f"corrupt checkpoint: {exc}") from None
    if pos != len(buf):
        raise ProtocolError("trailing bytes after the last checkpoint entry")
    return out


def pack_state(params: ModelParams, subspace: Subspace, optim_states: dict, step: int) -> dict:
    out = {f"param.{k}": v for k, v in params.named_tensors().items()}
    out["subspace.basis"] = subspace.basis
    out["subspace.version"] = np.array([subspace.version], np.int64)
    out["meta.step"] = np.array([step], np.int64)
    for name, st in optim_states.items():
        out[f"optim.{name}.m"] = st.m
        out[f"optim.{name}.v"] = st.v
        out[f"optim.{name}.t"] = np.array([st.t, _MODES[st.mode]], np.int64)
    return out


def unpack_state(blob: dict, template: ModelParams):
    """Returns (params, subspace, optim_states, step) shaped like ``template``."""
    params = template.copy()
    for layer in params.layers:
        for name in layer.NAMES:
            setattr(layer, name, blob[f"param.layers.{layer.layer_id}.{name}"].copy())
    for name in ("pos", "t_fixed", "t_s"):
        setattr(params.emb, name, blob[f"param.emb.{name}"].copy())
    params.head = blob["param.head"].copy()
    subspace = Subspace(blob["subspace.basis"], int(blob["subspace.version"][0]))
    modes = {v: k for k, v in _MODES.items()}
    states = {}
    for key in blob:
        if key.startswith("optim.") and key.endswith(".t"):
            name = key[len("optim."):-2]
            t, mode = blob[key]
            states[name] = OptimState(blob[f"optim.{name}.m"].copy(), blob[f"optim.{name}.v"].copy(),
                                      int(t), modes[int(mode)])
    return params, subspace, states, int(blob["meta.step"][0])
