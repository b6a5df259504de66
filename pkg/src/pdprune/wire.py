"""Framed binary format for shipping a (pruned) KV cache from prefill to decode.

All integers are little-endian::

    header   magic "PDKV" | version u16 | flags u16 | model_hash u64 | N u32
             | dtype u8 | layer_count u16                          (23 bytes)
    layer    layer_id u16 | mode u8 | keep u32 | n_heads u16 | head_dim u16
             | n_entries u32 | positions u32 * n_entries
             | K payload | V payload | crc32 u32 of the record bytes
    trailer  crc32 u32 over header and every layer record

``mode`` is 0 for a full layer and 1 for first/last retention, in which
case ``keep`` is ``floor(p * N)`` and the layer holds ``2 * keep`` entries.
Payloads are ``n_entries x n_heads x head_dim`` arrays in the header dtype
(0 = f32, 1 = f64, 2 = f16, the last for storage only).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, ChecksumError, ConsistencyError, ShapeError, TruncatedError,
                     UnsupportedVersionError)
from .kvprune import KVSelectionPlan, keep_count, retention_indices
from .model import KVCache, LayerKV
from .plan import as_stage_plan, surviving_layer_ids

MAGIC = b"PDKV"
VERSION = 1
FLAG_PRUNED = 0x1

MODE_FULL = 0
MODE_FIRST_LAST = 1

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.float16): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

HEADER = struct.Struct("<4sHHQIBH")
LAYER_HEAD = struct.Struct("<HBIHHI")
CRC = struct.Struct("<I")


@dataclass
class ManifestLayer:
    layer_id: int
    mode: int
    keep: int
    n_heads: int
    head_dim: int
    positions: np.ndarray
    keys: np.ndarray     # [n_entries, n_heads, head_dim]
    values: np.ndarray

    @property
    def payload_bytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


@dataclass
class TransferManifest:
    model_hash: int
    N: int
    dtype: np.dtype
    layers: list[ManifestLayer] = field(default_factory=list)
    flags: int = 0
    version: int = VERSION

    @property
    def payload_bytes(self) -> int:
        return sum(layer.payload_bytes for layer in self.layers)

    def to_cache(self, dtype=None) -> KVCache:
        dtype = np.dtype(dtype or (np.float64 if self.dtype == np.float16 else self.dtype))
        layers = {}
        for layer in self.layers:
            layers[layer.layer_id] = LayerKV(layer.keys[None].astype(dtype, copy=True),
                                             layer.values[None].astype(dtype, copy=True),
                                             layer.positions.astype(np.int64))
        return KVCache(layers, self.N, self.N)


def build_manifest(kv: KVCache, kv_plan: KVSelectionPlan | None, stage_plan=None,
                   model_hash: int = 0, dtype=None, decode_layers=None) -> TransferManifest:
    """Select what the decode node needs from a single-sequence prefill cache.

    ``decode_layers`` (layer ids run by the decode view) defaults to the cache
    layers that survive the decode removals of ``stage_plan``.
    """
    plan = as_stage_plan(stage_plan or ())
    plan.check()
    if decode_layers is None:
        decode_layers = surviving_layer_ids(sorted(kv.layers), plan.decode_removals)
    decode_layers = list(decode_layers)
    missing = [lid for lid in decode_layers if lid not in kv.layers]
    if missing:
        raise ConsistencyError(f"prefill cache lacks layers {missing} needed for decode")
    selected = set(kv_plan.selected_layers) if kv_plan is not None else set()
    N = kv.n_prefill
    layers = []
    for lid in decode_layers:
        lkv = kv.layers[lid]
        if lkv.keys.shape[0] != 1:
            raise ConsistencyError("only single-sequence caches can be shipped")
        if lkv.n_tokens != N or not np.array_equal(lkv.positions, np.arange(N)):
            raise ConsistencyError(f"layer {lid} is not a complete prefill cache")
        keys, values, positions = lkv.keys[0], lkv.values[0], lkv.positions
        mode, keep = MODE_FULL, 0
        if lid in selected:
            mode, keep = MODE_FIRST_LAST, keep_count(N, kv_plan.p)
            idx = retention_indices(N, kv_plan.p)
            keys, values, positions = keys[idx], values[idx], positions[idx]
        out_dtype = np.dtype(dtype or keys.dtype)
        layers.append(ManifestLayer(lid, mode, keep, keys.shape[1], keys.shape[2],
                                    positions.astype(np.int64), keys.astype(out_dtype),
                                    values.astype(out_dtype)))
    dt = np.dtype(dtype or (layers[0].keys.dtype if layers else np.float64))
    flags = FLAG_PRUNED if selected & set(decode_layers) else 0
    return TransferManifest(model_hash, N, dt, layers, flags)


def encode_manifest(man: TransferManifest) -> bytes:
    if man.dtype not in DTYPE_CODES:
        raise ValueError(f"unsupported dtype {man.dtype}")
    le = man.dtype.newbyteorder("<")
    parts = [HEADER.pack(MAGIC, man.version, man.flags, man.model_hash, man.N,
                         DTYPE_CODES[man.dtype], len(man.layers))]
    for layer in man.layers:
        n = len(layer.positions)
        shape = (n, layer.n_heads, layer.head_dim)
        if layer.keys.shape != shape or layer.values.shape != shape:
            raise ShapeError(f"layer {layer.layer_id} payload does not match its declared shape")
        rec = b"".join([
            LAYER_HEAD.pack(layer.layer_id, layer.mode, layer.keep, layer.n_heads, layer.head_dim, n),
            np.asarray(layer.positions, dtype="<u4").tobytes(),
            np.ascontiguousarray(layer.keys, dtype=le).tobytes(),
            np.ascontiguousarray(layer.values, dtype=le).tobytes(),
        ])
        parts.append(rec + CRC.pack(zlib.crc32(rec)))
    body = b"".join(parts)
    return body + CRC.pack(zlib.crc32(body))


def decode_manifest(data: bytes) -> TransferManifest:
    """Parse and fully validate a manifest; nothing is returned on any failure."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError("stream shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad manifest magic {data[:4]!r}")
    if len(data) < HEADER.size:
        raise TruncatedError("stream shorter than the header")
    _, version, flags, model_hash, N, dcode, n_layers = HEADER.unpack_from(data, 0)
    if version > VERSION or version < 1:
        raise UnsupportedVersionError(f"manifest version {version} is not supported")
    if dcode not in CODE_DTYPES:
        raise ShapeError(f"unknown dtype code {dcode}")
    dt = CODE_DTYPES[dcode]
    le = dt.newbyteorder("<")
    pos = HEADER.size
    layers = []
    for _ in range(n_layers):
        start = pos
        if pos + LAYER_HEAD.size > len(data):
            raise TruncatedError("stream ends inside a layer header")
        lid, mode, keep, n_heads, head_dim, n = LAYER_HEAD.unpack_from(data, pos)
        pos += LAYER_HEAD.size
        payload = n * n_heads * head_dim * dt.itemsize
        need = 4 * n + 2 * payload + CRC.size
        if pos + need > len(data):
            raise TruncatedError(f"stream ends inside layer {lid}")
        positions = np.frombuffer(data, dtype="<u4", count=n, offset=pos).astype(np.int64)
        pos += 4 * n
        keys = np.frombuffer(data, dtype=le, count=n * n_heads * head_dim, offset=pos)
        pos += payload
        values = np.frombuffer(data, dtype=le, count=n * n_heads * head_dim, offset=pos)
        pos += payload
        (crc,) = CRC.unpack_from(data, pos)
        if zlib.crc32(data[start:pos]) != crc:
            raise ChecksumError(f"CRC mismatch in layer {lid}")
        pos += CRC.size
        if mode not in (MODE_FULL, MODE_FIRST_LAST):
            raise ShapeError(f"layer {lid} has unknown retention mode {mode}")
        if mode == MODE_FULL and n != N:
            raise ShapeError(f"full layer {lid} declares {n} entries for N={N}")
        if mode == MODE_FIRST_LAST and n != 2 * keep:
            raise ShapeError(f"first/last layer {lid} declares {n} entries for keep={keep}")
        if n > 1 and np.any(np.diff(positions) <= 0):
            raise ShapeError(f"layer {lid} positions are not strictly increasing")
        if n and positions[-1] >= N:
            raise ShapeError(f"layer {lid} position beyond N")
        shape = (n, n_heads, head_dim)
        layers.append(ManifestLayer(lid, mode, keep, n_heads, head_dim, positions,
                                    keys.reshape(shape).astype(dt), values.reshape(shape).astype(dt)))
    if pos + CRC.size > len(data):
        raise TruncatedError("stream ends before the trailer")
    if pos + CRC.size < len(data):
        raise ShapeError("trailing bytes after the manifest")
    (crc,) = CRC.unpack_from(data, pos)
    if zlib.crc32(data[:pos]) != crc:
        raise ChecksumError("manifest trailer CRC mismatch")
    ids = [layer.layer_id for layer in layers]
    if len(set(ids)) != len(ids):
        raise ShapeError("duplicate layer ids")
    return TransferManifest(model_hash, N, dt, layers, flags, version)


def serialize_manifest(kv: KVCache, kv_plan: KVSelectionPlan | None, stage_plan=None,
                       model_hash: int = 0, dtype=None, decode_layers=None) -> bytes:
    return encode_manifest(build_manifest(kv, kv_plan, stage_plan, model_hash, dtype, decode_layers))


def deserialize_manifest(data: bytes) -> tuple[KVCache, TransferManifest]:
    man = decode_manifest(data)
    return man.to_cache(), man
