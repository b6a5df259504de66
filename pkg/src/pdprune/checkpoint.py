"""Binary model checkpoints.

Layout (little-endian)::

    magic "PDTK" | version u16
    config: n_blocks u16 | d_model u16 | n_heads u16 | vocab u32 | max_seq u32
            | dtype u8 | mlp_ratio u8
    layer count u16 | layer ids u16 * count
    parameters: embed, per layer (norm1 wq wk wv wo norm2 w1 w2), final_norm, unembed
    merged-block count u16, then per merged block:
        first u16 | second u16 | source u16 | steps u32 | init_mse f64 | final_mse f64
        | block parameters
    CRC32 u32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedError, UnsupportedVersionError
from .model import BLOCK_PARAMS, Block, ModelConfig, TransformerModel

MAGIC = b"PDTK"
VERSION = 1
DTYPE_CODES = {"f32": 0, "f64": 1}
_CONFIG = struct.Struct("<HHHIIBB")
_MERGED = struct.Struct("<HHHIdd")


@dataclass
class MergedRecord:
    """A distilled replacement for the pair ``(first, first + 1)``."""

    pair: tuple[int, int]
    source: int
    block: Block
    steps: int = 0
    init_mse: float = float("nan")
    final_mse: float = float("nan")


def merged_map(records) -> dict[tuple[int, int], Block]:
    """Pair -> trained block, the form :func:`pdprune.plan.build_view` takes."""
    return {tuple(rec.pair): rec.block for rec in records}


def _shapes(cfg: ModelConfig):
    d, f = cfg.d_model, cfg.d_ff
    return {"norm1": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "norm2": (d,), "w1": (d, f), "w2": (f, d)}


def _le(arr, dtype) -> bytes:
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def _block_bytes(blk: Block, dtype) -> bytes:
    return b"".join(_le(getattr(blk, k), dtype) for k in BLOCK_PARAMS)


def dumps(model: TransformerModel, merged: list[MergedRecord] | None = None) -> bytes:
    cfg = model.config
    dt = cfg.np_dtype
    out = [MAGIC, struct.pack("<H", VERSION),
           _CONFIG.pack(cfg.n_blocks, cfg.d_model, cfg.n_heads, cfg.vocab, cfg.max_seq,
                        DTYPE_CODES[cfg.dtype], cfg.mlp_ratio),
           struct.pack("<H", model.n_layers),
           struct.pack(f"<{model.n_layers}H", *model.layer_ids),
           _le(model.embed, dt)]
    out += [_block_bytes(b, dt) for b in model.blocks]
    out += [_le(model.final_norm, dt), _le(model.unembed, dt)]
    merged = merged or []
    out.append(struct.pack("<H", len(merged)))
    for rec in merged:
        out.append(_MERGED.pack(rec.pair[0], rec.pair[1], rec.source, rec.steps,
                                rec.init_mse, rec.final_mse))
        out.append(_block_bytes(rec.block, dt))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError("checkpoint ends early")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st):
        if isinstance(st, str):
            st = struct.Struct(st)
        return st.unpack(self.take(st.size))

    def array(self, shape, dtype):
        n = int(np.prod(shape))
        le = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(n * le.itemsize), dtype=le).astype(dtype).reshape(shape)


def loads(data: bytes) -> tuple[TransformerModel, list[MergedRecord]]:
    if len(data) < 10:
        raise TruncatedError("checkpoint too short")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    rd = _Reader(body)
    rd.take(4)
    (version,) = rd.unpack("<H")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported")
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC mismatch")
    n_blocks, d_model, n_heads, vocab, max_seq, dcode, mlp_ratio = rd.unpack(_CONFIG)
    dtype = {v: k for k, v in DTYPE_CODES.items()}[dcode]
    cfg = ModelConfig(n_blocks, d_model, n_heads, vocab, max_seq, dtype, mlp_ratio)
    dt = cfg.np_dtype
    shapes = _shapes(cfg)

    def block():
        return Block(**{k: rd.array(shapes[k], dt) for k in BLOCK_PARAMS}, n_heads=n_heads)

    (n_layers,) = rd.unpack("<H")
    layer_ids = rd.unpack(f"<{n_layers}H")
    embed = rd.array((vocab, d_model), dt)
    blocks = tuple(block() for _ in range(n_layers))
    final_norm = rd.array((d_model,), dt)
    unembed = rd.array((d_model, vocab), dt)
    (n_merged,) = rd.unpack("<H")
    merged = []
    for _ in range(n_merged):
        i, j, src, steps, init_mse, final_mse = rd.unpack(_MERGED)
        merged.append(MergedRecord((i, j), src, block(), steps, init_mse, final_mse))
    if rd.pos != len(body):
        raise ChecksumError("trailing bytes after checkpoint payload")
    model = TransformerModel(cfg, embed, blocks, final_norm, unembed, tuple(layer_ids))
    return model, merged


def save(path, model: TransformerModel, merged: list[MergedRecord] | None = None) -> None:
    Path(path).write_bytes(dumps(model, merged))


def load(path) -> tuple[TransformerModel, list[MergedRecord]]:
    return loads(Path(path).read_bytes())
