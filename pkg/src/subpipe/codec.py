"""Wire frames for pipeline boundaries.

Frame layout (little-endian)::

    magic u32 = 0x53554250 | version u8 | msg_type u8 | layer_id u16 |
    microbatch_id u16 | subspace_version u32 | b u16 | n u16 | k u16 |
    encoding u16 | token_ids_len u32 | payload_len u64 |
    token ids (u32 each) | payload

``payload_len`` counts bytes. ``encoding`` occupies the reserved slot and is
0 for dense f32 payloads; the lossy baselines use non-zero tags.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, RangeError, StaleSubspaceError
from .linalg import qr_thin
from .model import EmbeddingTables, check_tokens, default_positions
from .subspace import Subspace, compress, decompress

MAGIC = 0x53554250
WIRE_VERSION = 1
HEADER = struct.Struct("<IBBHHIHHHHIQ")
HEADER_SIZE = HEADER.size

MSG_FORWARD = 1
MSG_BACKWARD = 2
MSG_SUBSPACE = 3
MSG_CONTROL = 4

ENC_DENSE = 0
ENC_TOPK = 1
ENC_QUANT8 = 2
ENC_QUANT16 = 3
ENC_SVD = 4

CTRL_BARRIER = 1
CTRL_ABORT = 2


@dataclass
class Frame:
    msg_type: int
    layer_id: int
    microbatch_id: int
    subspace_version: int
    b: int
    n: int
    k: int
    payload: np.ndarray
    token_ids: np.ndarray | None = None
    encoding: int = ENC_DENSE

    def payload_bytes(self) -> int:
        if self.encoding == ENC_DENSE:
            return int(self.payload.size) * 4
        return int(self.payload.size)

    def nbytes(self) -> int:
        ntok = 0 if self.token_ids is None else int(self.token_ids.size)
        return HEADER_SIZE + 4 * ntok + self.payload_bytes()


def frame_size(b, n, k, with_tokens) -> int:
    """Analytic wire size of a dense frame."""
    return HEADER_SIZE + (4 * b * n if with_tokens else 0) + 4 * b * n * k


def serialize(frame: Frame) -> bytes:
    tokens = b"" if frame.token_ids is None else np.ascontiguousarray(frame.token_ids, dtype="<u4").tobytes()
    if frame.encoding == ENC_DENSE:
        payload = np.ascontiguousarray(frame.payload, dtype="<f4").tobytes()
    else:
        payload = np.ascontiguousarray(frame.payload, dtype=np.uint8).tobytes()
    header = HEADER.pack(MAGIC, WIRE_VERSION, frame.msg_type, frame.layer_id, frame.microbatch_id,
                         frame.subspace_version, frame.b, frame.n, frame.k, frame.encoding,
                         len(tokens) // 4, len(payload))
    return header + tokens + payload


def deserialize(buf: bytes) -> Frame:
    if len(buf) < HEADER_SIZE:
        raise ProtocolError("truncated frame header")
    (magic, version, msg_type, layer_id, mb, sv, b, n, k, enc, ntok, plen) = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    if len(buf) != HEADER_SIZE + 4 * ntok + plen:
        raise ProtocolError("frame length does not match header")
    off = HEADER_SIZE
    tokens = None
    if ntok:
        tokens = np.frombuffer(buf, dtype="<u4", count=ntok, offset=off).reshape(b, n).astype(np.int64)
        off += 4 * ntok
    if enc == ENC_DENSE:
        payload = np.frombuffer(buf, dtype="<f4", count=plen // 4, offset=off).astype(np.float32)
        if payload.size != b * n * k:
            raise ProtocolError("payload length does not match b*n*k")
        payload = payload.reshape(b, n, k)
    else:
        payload = np.frombuffer(buf, dtype=np.uint8, count=plen, offset=off).copy()
    return Frame(msg_type, layer_id, mb, sv, b, n, k, payload, tokens, enc)


def _positions(n, positions, n_max):
    if positions is None:
        positions = default_positions(n)
    positions = np.asarray(positions)
    if positions.size and (positions.max() >= n_max or positions.min() < 0):
        raise RangeError(f"position outside [0, {n_max})")
    return positions


def encode_forward(x_next, tokens, emb: EmbeddingTables, s: Subspace, positions=None,
                   layer_id=0, microbatch_id=0) -> Frame:
    """Coefficients of (X - PE - T_fixed[t]) in the subspace basis."""
    x_next = np.asarray(x_next)
    b, n, _ = x_next.shape
    positions = _positions(n, positions, emb.pos.shape[0])
    tokens = check_tokens(tokens, emb.t_fixed.shape[0])
    coeff = compress(x_next - emb.lookup_fixed(tokens, positions), s)
    return Frame(MSG_FORWARD, layer_id, microbatch_id, s.version, b, n, s.k, coeff,
                 np.asarray(tokens, dtype=np.int64))


def _check_frame(frame: Frame, msg_type, s: Subspace | None):
    if frame.msg_type != msg_type:
        raise ProtocolError(f"expected msg_type {msg_type}, got {frame.msg_type}")
    if frame.encoding != ENC_DENSE:
        raise ProtocolError("subspace codec frames must be dense")
    if s is not None and frame.subspace_version != s.version:
        raise StaleSubspaceError(frame.subspace_version, s.version)


def decode_forward(frame: Frame, emb: EmbeddingTables, s: Subspace, positions=None, dtype=None) -> np.ndarray:
    _check_frame(frame, MSG_FORWARD, s)
    if frame.token_ids is None:
        raise ProtocolError("forward frame without token ids")
    positions = _positions(frame.n, positions, emb.pos.shape[0])
    coeff = frame.payload.astype(dtype or emb.t_fixed.dtype, copy=False)
    return decompress(coeff, s) + emb.lookup_fixed(frame.token_ids, positions)


def encode_backward(g, s: Subspace, layer_id=0, microbatch_id=0) -> Frame:
    g = np.asarray(g)
    b, n, _ = g.shape
    return Frame(MSG_BACKWARD, layer_id, microbatch_id, s.version, b, n, s.k, compress(g, s))


def decode_backward(frame: Frame, s: Subspace, dtype=None) -> np.ndarray:
    _check_frame(frame, MSG_BACKWARD, s)
    coeff = frame.payload.astype(dtype or s.dtype, copy=False)
    return decompress(coeff, s)


def roundtrip_forward(x, tokens, emb, s, positions=None) -> np.ndarray:
    return decode_forward(encode_forward(x, tokens, emb, s, positions), emb, s, positions, x.dtype)


def roundtrip_backward(g, s) -> np.ndarray:
    return decode_backward(encode_backward(g, s), s, g.dtype)


def encode_dense(msg_type, x, version, tokens=None, layer_id=0, microbatch_id=0) -> Frame:
    """Uncompressed boundary frame carrying the full d-dimensional tensor."""
    b, n, d = x.shape
    return Frame(msg_type, layer_id, microbatch_id, version, b, n, d, x,
                 None if tokens is None else np.asarray(tokens, dtype=np.int64))


def decode_dense(frame: Frame, dtype=np.float32) -> np.ndarray:
    if frame.encoding != ENC_DENSE:
        raise ProtocolError("expected a dense frame")
    return frame.payload.astype(dtype, copy=False)


def encode_subspace(s: Subspace) -> Frame:
    return Frame(MSG_SUBSPACE, 0, 0, s.version, 1, s.d, s.k, s.basis[None])


def decode_subspace(frame: Frame, dtype=np.float32) -> Subspace:
    """Rebuild a broadcast basis.

    An f32 basis crosses the wire exactly. Wider dtypes are re-orthonormalized
    after the f32 rounding, deterministically from the received bytes.
    """
    if frame.msg_type != MSG_SUBSPACE:
        raise ProtocolError("expected a subspace frame")
    basis = np.asarray(frame.payload[0])
    if np.dtype(dtype) == np.float32:
        return Subspace(basis.astype(np.float32), frame.subspace_version)
    q, _ = qr_thin(basis.astype(np.float64))
    return Subspace(q.astype(dtype), frame.subspace_version)


def wire_subspace(s: Subspace) -> Subspace:
    """The snapshot every receiver ends up with after a broadcast of ``s``."""
    return decode_subspace(deserialize(serialize(encode_subspace(s))), s.dtype)


def control_frame(opcode, version=0) -> Frame:
    return Frame(MSG_CONTROL, 0, opcode, version, 0, 0, 0, np.zeros((0, 0, 0), np.float32))


# Lossy baselines ----------------------------------------------------------

def _topk_count(keep_fraction, d) -> int:
    if not 0 < keep_fraction <= 1:
        raise RangeError("keep_fraction must lie in (0, 1]")
    return max(1, min(d, int(np.floor(keep_fraction * d + 0.5))))


def encode_topk(x, keep_fraction) -> bytes:
    x = np.asarray(x)
    rows = x.reshape(-1, x.shape[-1])
    c = _topk_count(keep_fraction, rows.shape[1])
    idx = np.argsort(-np.abs(rows), axis=1, kind="stable")[:, :c]
    idx.sort(axis=1)
    vals = np.take_along_axis(rows, idx, axis=1)
    return vals.astype("<f4").tobytes() + idx.astype("<u4").tobytes()


def decode_topk(buf, shape, keep_fraction) -> np.ndarray:
    d = shape[-1]
    rows = int(np.prod(shape[:-1]))
    c = _topk_count(keep_fraction, d)
    vals = np.frombuffer(buf, dtype="<f4", count=rows * c).reshape(rows, c)
    idx = np.frombuffer(buf, dtype="<u4", count=rows * c, offset=rows * c * 4).reshape(rows, c)
    out = np.zeros((rows, d), dtype=np.float32)
    np.put_along_axis(out, idx.astype(np.int64), vals, axis=1)
    return out.reshape(shape)


def encode_quantize(x, bits) -> bytes:
    if bits not in (8, 16):
        raise RangeError("bits must be 8 or 16")
    x = np.asarray(x, dtype=np.float64)
    lo = np.float32(x.min()) if x.size else np.float32(0)
    hi = np.float32(x.max()) if x.size else np.float32(0)
    levels = (1 << bits) - 1
    span = float(hi) - float(lo)
    if span > 0:
        codes = np.rint((x - float(lo)) / span * levels)
    else:
        codes = np.zeros_like(x)
    dt = "<u1" if bits == 8 else "<u2"
    return np.array([lo, hi], dtype="<f4").tobytes() + np.clip(codes, 0, levels).astype(dt).tobytes()


def decode_quantize(buf, shape, bits) -> np.ndarray:
    lo, hi = np.frombuffer(buf, dtype="<f4", count=2).astype(np.float64)
    dt = "<u1" if bits == 8 else "<u2"
    codes = np.frombuffer(buf, dtype=dt, offset=8).astype(np.float64)
    levels = (1 << bits) - 1
    out = lo + codes * ((hi - lo) / levels)
    return out.reshape(shape).astype(np.float32)


def encode_svd(x, rank) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    if rank < 1 or rank > min(flat.shape):
        raise RangeError(f"rank {rank} outside [1, {min(flat.shape)}]")
    u, sv, vt = np.linalg.svd(flat, full_matrices=False)
    left = u[:, :rank] * sv[:rank]
    return left.astype("<f4").tobytes() + vt[:rank].astype("<f4").tobytes()


def decode_svd(buf, shape, rank) -> np.ndarray:
    d = shape[-1]
    rows = int(np.prod(shape[:-1]))
    left = np.frombuffer(buf, dtype="<f4", count=rows * rank).reshape(rows, rank)
    right = np.frombuffer(buf, dtype="<f4", count=rank * d, offset=rows * rank * 4).reshape(rank, d)
    return (left.astype(np.float64) @ right.astype(np.float64)).astype(np.float32).reshape(shape)


def lossy_topk(x, keep_fraction):
    buf = encode_topk(x, keep_fraction)
    return decode_topk(buf, np.shape(x), keep_fraction), len(buf)


def lossy_quantize(x, bits):
    buf = encode_quantize(x, bits)
    return decode_quantize(buf, np.shape(x), bits), len(buf)


def lossy_svd(x, rank):
    buf = encode_svd(x, rank)
    return decode_svd(buf, np.shape(x), rank), len(buf)


@dataclass(frozen=True)
class LossyCodec:
    """A lossy baseline with its parameter chosen for a compression budget."""

    name: str
    param: float

    @property
    def encoding(self) -> int:
        if self.name == "topk":
            return ENC_TOPK
        if self.name == "svd":
            return ENC_SVD
        return ENC_QUANT8 if int(self.param) == 8 else ENC_QUANT16

    def encode(self, x) -> bytes:
        if self.name == "topk":
            return encode_topk(x, self.param)
        if self.name == "quant":
            return encode_quantize(x, int(self.param))
        return encode_svd(x, int(self.param))

    def decode(self, buf, shape) -> np.ndarray:
        if self.name == "topk":
            return decode_topk(buf, shape, self.param)
        if self.name == "quant":
            return decode_quantize(buf, shape, int(self.param))
        return decode_svd(buf, shape, int(self.param))

    def apply(self, x):
        buf = self.encode(x)
        return self.decode(buf, np.shape(x)), len(buf)


LOSSY_NAMES = ("topk", "quant", "svd")


def codec_for_budget(name, ratio, shape) -> LossyCodec:
    """Pick the codec parameter that fits ``dense_bytes / ratio``.

    Quantization cannot go below 8 bits, so at ratios above 4 it runs at
    8 bits and overshoots the budget; 16 bits is used when the ratio is <= 2.
    """
    if ratio <= 0:
        raise RangeError("compression ratio must be positive")
    d = shape[-1]
    rows = int(np.prod(shape[:-1]))
    if name == "topk":
        # each kept entry costs a 4-byte value and a 4-byte index
        return LossyCodec("topk", max(1, int(d / (2 * ratio))) / d)
    if name == "quant":
        return LossyCodec("quant", 16 if ratio <= 2 else 8)
    if name == "svd":
        rank = int(rows * d / (ratio * (rows + d)))
        return LossyCodec("svd", max(1, min(rank, rows, d)))
    raise RangeError(f"unknown lossy codec {name!r}")


def encode_lossy(msg_type, x, codec: LossyCodec, version, tokens=None, layer_id=0, microbatch_id=0) -> Frame:
    b, n, d = x.shape
    buf = codec.encode(x)
    return Frame(msg_type, layer_id, microbatch_id, version, b, n, d,
                 np.frombuffer(buf, dtype=np.uint8).copy(),
                 None if tokens is None else np.asarray(tokens, dtype=np.int64), codec.encoding)


def decode_lossy(frame: Frame, codec: LossyCodec) -> np.ndarray:
    if frame.encoding != codec.encoding:
        raise ProtocolError(f"frame encoding {frame.encoding} does not match codec {codec.name}")
    return codec.decode(frame.payload.tobytes(), (frame.b, frame.n, frame.k))


def error_bound(e, nu, num_layers, layer) -> float:
    """Upper bound on cumulative backward error at ``layer`` (1-based).

    Errors of norm at most ``e`` injected at layers ``layer..num_layers`` and
    Jacobians of spectral norm at most ``nu`` give
    ``e * (nu**(L - l + 1) - 1) / (nu - 1)``; the ``nu == 1`` limit is
    ``e * (L - l + 1)``.
    """
    if e < 0 or nu <= 0 or not 1 <= layer <= num_layers:
        raise RangeError("need e >= 0, nu > 0 and 1 <= l <= L")
    terms = num_layers - layer + 1
    if abs(nu - 1.0) < 1e-12:
        return e * terms
    return e * (nu ** terms - 1.0) / (nu - 1.0)


