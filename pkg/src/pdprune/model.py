"""A tiny decoder-only transformer in numpy.

Pre-norm blocks (RMSNorm -> multi-head causal attention with rotary
positions -> residual, RMSNorm -> SiLU MLP -> residual). Every block carries
a *layer id*, the index of the block in the original model, so that pruned
views and KV caches keep referring to the same layers after blocks are
skipped or merged.

Attention masking is position based: a query at absolute position ``t`` sees
every cached key whose stored position is ``<= t``. Pruned caches therefore
need no special casing; their missing positions are simply absent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigurationError, ConsistencyError, EmptyModelError

ROPE_BASE = 10000.0
NORM_EPS = 1e-6

DTYPES = {"f32": np.float32, "f64": np.float64}
BLOCK_PARAMS = ("norm1", "wq", "wk", "wv", "wo", "norm2", "w1", "w2")


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 10
    d_model: int = 32
    n_heads: int = 4
    vocab: int = 64
    max_seq: int = 64
    dtype: str = "f64"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigurationError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigurationError("rotary embeddings need an even head_dim")
        if self.vocab < 2:
            raise ConfigurationError(f"vocab must be >= 2, got {self.vocab}")
        if self.max_seq < 2:
            raise ConfigurationError(f"max_seq must be >= 2, got {self.max_seq}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.mlp_ratio * self.d_model

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


@dataclass(frozen=True, eq=False)
class Block:
    norm1: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    norm2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    n_heads: int

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCK_PARAMS}

    def with_params(self, **arrays) -> "Block":
        return replace(self, **arrays)

    def copy(self) -> "Block":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})

    def allclose(self, other: "Block", **kw) -> bool:
        return all(np.allclose(a, other.params()[k], **kw) for k, a in self.params().items())

    def array_equal(self, other: "Block") -> bool:
        return all(np.array_equal(a, other.params()[k]) for k, a in self.params().items())


@dataclass(frozen=True, eq=False)
class TransformerModel:
    config: ModelConfig
    embed: np.ndarray
    blocks: tuple[Block, ...]
    final_norm: np.ndarray
    unembed: np.ndarray
    layer_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.layer_ids:
            object.__setattr__(self, "layer_ids", tuple(range(len(self.blocks))))
        if len(self.layer_ids) != len(self.blocks):
            raise ConsistencyError("layer_ids and blocks differ in length")

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def without(self, removed: Iterable[int]) -> "TransformerModel":
        """Return the view that skips every block whose layer id is in ``removed``."""
        removed = set(removed)
        unknown = removed - set(self.layer_ids)
        if unknown:
            raise ValueError(f"unknown block indices {sorted(unknown)}")
        keep = [(i, b) for i, b in zip(self.layer_ids, self.blocks) if i not in removed]
        if not keep:
            raise EmptyModelError("every block was removed")
        return replace(self, blocks=tuple(b for _, b in keep),
                       layer_ids=tuple(i for i, _ in keep))

    def with_layers(self, layers: Iterable[tuple[int, Block]]) -> "TransformerModel":
        layers = list(layers)
        if not layers:
            raise EmptyModelError("every block was removed")
        return replace(self, blocks=tuple(b for _, b in layers),
                       layer_ids=tuple(i for i, _ in layers))

    def block(self, layer_id: int) -> Block:
        return self.blocks[self.layer_ids.index(layer_id)]

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("embed", self.embed)]
        for lid, blk in zip(self.layer_ids, self.blocks):
            out.extend((f"block{lid}.{k}", v) for k, v in blk.params().items())
        out += [("final_norm", self.final_norm), ("unembed", self.unembed)]
        return out

    def fingerprint(self) -> int:
        """64-bit digest of layer ids and parameter bytes."""
        h = hashlib.blake2b(digest_size=8)
        h.update(np.asarray(self.layer_ids, dtype="<i8").tobytes())
        for _, arr in self.arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return int.from_bytes(h.digest(), "little")


def build_model(config: ModelConfig, seed: int) -> TransformerModel:
    rng = np.random.default_rng(seed)
    d, f, L = config.d_model, config.d_ff, config.n_blocks
    dt = config.np_dtype
    resid_scale = 1.0 / np.sqrt(2.0 * L)

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(dt)

    embed = normal((config.vocab, d), 1.0)
    blocks = []
    for _ in range(L):
        blocks.append(Block(
            norm1=np.ones(d, dtype=dt),
            wq=normal((d, d), d ** -0.5),
            wk=normal((d, d), d ** -0.5),
            wv=normal((d, d), d ** -0.5),
            wo=normal((d, d), d ** -0.5 * resid_scale),
            norm2=np.ones(d, dtype=dt),
            w1=normal((d, f), d ** -0.5),
            w2=normal((f, d), f ** -0.5 * resid_scale),
            n_heads=config.n_heads,
        ))
    return TransformerModel(
        config=config,
        embed=embed,
        blocks=tuple(blocks),
        final_norm=np.ones(d, dtype=dt),
        unembed=normal((d, config.vocab), d ** -0.5),
    )


# ---------------------------------------------------------------------------
# primitives


def rms_norm(x, gain):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x * inv * gain, inv


def rope_tables(positions, head_dim, dtype):
    half = head_dim // 2
    freqs = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(x, cos, sin, inverse=False):
    """Rotate ``x`` of shape [B, T, H, hd]; ``inverse`` applies the transpose."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[None, :, None, :], sin[None, :, None, :]
    if inverse:
        s = -s
    out = np.empty_like(x)
    np.multiply(x1, c, out=out[..., :half])
    out[..., :half] -= x2 * s
    np.multiply(x1, s, out=out[..., half:])
    out[..., half:] += x2 * c
    return out


def silu(u):
    sig = np.tanh(0.5 * u)
    sig *= 0.5
    sig += 0.5
    return u * sig, sig


def softmax(z, axis=-1):
    e = z - np.max(z, axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= np.sum(e, axis=axis, keepdims=True)
    return e


def masked_softmax(scores, visible):
    """Softmax over the last axis restricted to ``visible`` entries (others get 0).

    Masked logits are zeroed before ``exp`` rather than set to ``-inf``;
    exp(-inf) takes a slow path in numpy.
    """
    mask = visible.astype(scores.dtype)
    mx = np.max(np.where(visible, scores, -np.inf), axis=-1, keepdims=True)
    e = scores - mx
    e *= mask
    np.exp(e, out=e)
    e *= mask
    e /= np.sum(e, axis=-1, keepdims=True)
    return e


class BlockCache(NamedTuple):
    x: np.ndarray
    a: np.ndarray
    inv1: np.ndarray
    q: np.ndarray          # rotated queries [B, T, H, hd]
    k: np.ndarray          # rotated keys, past included [B, S, H, hd]
    v: np.ndarray
    probs: np.ndarray      # [B, H, T, S]
    o: np.ndarray          # merged heads [B, T, d]
    x2: np.ndarray
    c: np.ndarray
    inv2: np.ndarray
    u: np.ndarray
    s: np.ndarray
    sig: np.ndarray
    cos: np.ndarray
    sin: np.ndarray


def block_forward(blk: Block, x, positions, past=None, key_mask=None):
    """Run one block.

    ``past`` is ``(k, v, pos)`` of already-cached rotated keys, values and
    their absolute positions. ``key_mask`` optionally hides past entries
    (boolean, one flag per past entry). Returns ``(y, k_new, v_new, cache)``.
    """
    B, T, d = x.shape
    H = blk.n_heads
    hd = d // H
    positions = np.asarray(positions)
    a, inv1 = rms_norm(x, blk.norm1)
    cos, sin = rope_tables(positions, hd, x.dtype)
    q = apply_rope((a @ blk.wq).reshape(B, T, H, hd), cos, sin)
    k_new = apply_rope((a @ blk.wk).reshape(B, T, H, hd), cos, sin)
    v_new = (a @ blk.wv).reshape(B, T, H, hd)

    if past is None:
        k, v, key_pos = k_new, v_new, positions
        visible = key_pos[None, :] <= positions[:, None]
    else:
        pk, pv, ppos = past
        k = np.concatenate([pk, k_new], axis=1)
        v = np.concatenate([pv, v_new], axis=1)
        key_pos = np.concatenate([np.asarray(ppos), positions])
        visible = key_pos[None, :] <= positions[:, None]
        if key_mask is not None:
            visible[:, : len(ppos)] &= np.asarray(key_mask, dtype=bool)[None, :]

    scores = (q.transpose(0, 2, 1, 3) @ k.transpose(0, 2, 3, 1)) / np.sqrt(hd).astype(x.dtype)
    probs = masked_softmax(scores, visible[None, None])
    o = (probs @ v.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3).reshape(B, T, d)
    x2 = x + o @ blk.wo
    c, inv2 = rms_norm(x2, blk.norm2)
    u = c @ blk.w1
    s, sig = silu(u)
    y = x2 + s @ blk.w2
    cache = BlockCache(x, a, inv1, q, k, v, probs, o, x2, c, inv2, u, s, sig, cos, sin)
    return y, k_new, v_new, cache


def block_apply(blk: Block, x, positions=None):
    """Plain causal forward of a block over ``x`` [B, T, d]."""
    if positions is None:
        positions = np.arange(x.shape[1])
    return block_forward(blk, x, positions)[0]


# ---------------------------------------------------------------------------
# caches, traces and statistics


@dataclass
class LayerKV:
    keys: np.ndarray        # [B, S, H, hd], rotary already applied
    values: np.ndarray
    positions: np.ndarray   # [S] absolute positions, strictly increasing

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.keys.shape != self.values.shape:
            raise ConsistencyError("key and value shapes differ")
        if self.keys.shape[1] != len(self.positions):
            raise ConsistencyError("position list does not match cache length")
        if len(self.positions) > 1 and np.any(np.diff(self.positions) <= 0):
            raise ConsistencyError("cache positions must be strictly increasing")

    @property
    def n_tokens(self) -> int:
        return len(self.positions)

    def select(self, mask) -> "LayerKV":
        return LayerKV(self.keys[:, mask], self.values[:, mask], self.positions[mask])


@dataclass
class KVCache:
    layers: dict[int, LayerKV]
    n_prefill: int
    next_position: int

    def copy(self) -> "KVCache":
        return KVCache(
            {lid: LayerKV(kv.keys.copy(), kv.values.copy(), kv.positions.copy())
             for lid, kv in self.layers.items()},
            self.n_prefill, self.next_position)

    def token_counts(self) -> dict[int, int]:
        return {lid: kv.n_tokens for lid, kv in self.layers.items()}

    def prune(self, retained: dict[int, np.ndarray]) -> "KVCache":
        """Keep only ``retained`` prefill positions in the given layers."""
        layers = {}
        for lid, kv in self.layers.items():
            if lid in retained:
                layers[lid] = kv.select(_visible_mask(kv.positions, self.n_prefill, retained[lid]))
            else:
                layers[lid] = kv
        return KVCache(layers, self.n_prefill, self.next_position)


@dataclass
class HiddenTrace:
    """Hidden states around every executed block.

    ``states[0]`` is the embedding output and ``states[j + 1]`` the output of
    the j-th executed block (layer id ``layer_ids[j]``).
    """

    states: list[np.ndarray]
    layer_ids: tuple[int, ...]

    def __len__(self):
        return len(self.states)

    def extend(self, other: "HiddenTrace") -> "HiddenTrace":
        if other.layer_ids != self.layer_ids:
            raise ConsistencyError("traces come from different views")
        return HiddenTrace([np.concatenate([a, b]) for a, b in zip(self.states, other.states)],
                           self.layer_ids)


@dataclass
class AttentionStats:
    """Attention mass per layer and head, averaged over queries and samples.

    ``scores[layer_id]`` has shape [n_heads, N]; each row is a distribution.
    """

    scores: dict[int, np.ndarray]
    n_samples: int = 0
    n_tokens: int = 0

    def merge(self, other: "AttentionStats") -> "AttentionStats":
        if not self.n_samples:
            return other
        if other.n_tokens != self.n_tokens or set(other.scores) != set(self.scores):
            raise ConsistencyError("cannot merge statistics of different shapes")
        n = self.n_samples + other.n_samples
        merged = {lid: (s * self.n_samples + other.scores[lid] * other.n_samples) / n
                  for lid, s in self.scores.items()}
        return AttentionStats(merged, n, self.n_tokens)


class PrefillOutput(NamedTuple):
    logits: np.ndarray
    trace: HiddenTrace
    kv: KVCache
    attention: AttentionStats


# ---------------------------------------------------------------------------
# forward passes


def _check_tokens(model: TransformerModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab):
        raise ValueError(f"token out of vocab range [0, {model.config.vocab})")
    return tokens


def _visible_mask(positions, n_prefill, retained):
    keep = np.isin(positions, np.asarray(retained, dtype=np.int64))
    return keep | (positions >= n_prefill)


def _logits(model, h):
    z, _ = rms_norm(h, model.final_norm)
    return z @ model.unembed


def forward_tokens(model: TransformerModel, tokens, past: KVCache | None = None,
                   retained: dict[int, np.ndarray] | None = None,
                   keep_trace=False, keep_attention=False, keep_caches=False):
    """Shared forward over a [B, T] token batch, optionally continuing ``past``.

    Returns ``(logits, new_kv, states, attention, caches)`` where entries not
    requested are ``None``.
    """
    tokens = _check_tokens(model, tokens)
    B, T = tokens.shape
    start = 0 if past is None else past.next_position
    if start + T > model.config.max_seq:
        raise ValueError(f"sequence of length {start + T} exceeds max_seq={model.config.max_seq}")
    positions = np.arange(start, start + T)
    h = model.embed[tokens]
    states = [h] if keep_trace else None
    attn = {} if keep_attention else None
    caches = [] if keep_caches else None
    new_layers = {}
    for lid, blk in zip(model.layer_ids, model.blocks):
        layer_past, key_mask = None, None
        if past is not None:
            if lid not in past.layers:
                raise ConsistencyError(f"KV cache has no entries for layer {lid}")
            lkv = past.layers[lid]
            if lkv.keys.shape[0] != B:
                raise ConsistencyError("batch size differs from cached batch size")
            layer_past = (lkv.keys, lkv.values, lkv.positions)
            if retained is not None and lid in retained:
                key_mask = _visible_mask(lkv.positions, past.n_prefill, retained[lid])
        h, k_new, v_new, cache = block_forward(blk, h, positions, layer_past, key_mask)
        if past is None:
            new_layers[lid] = LayerKV(k_new, v_new, positions)
        else:
            new_layers[lid] = LayerKV(cache.k, cache.v,
                                      np.concatenate([layer_past[2], positions]))
        if keep_trace:
            states.append(h)
        if keep_attention:
            attn[lid] = cache.probs.mean(axis=(0, 2))
        if keep_caches:
            caches.append(cache)
    logits = _logits(model, h)
    n_prefill = T if past is None else past.n_prefill
    return logits, KVCache(new_layers, n_prefill, start + T), states, attn, caches


def forward_prefill(model: TransformerModel, tokens, removed_blocks=()) -> PrefillOutput:
    """Prefill a prompt (``[T]`` or ``[B, T]``) with ``removed_blocks`` skipped."""
    view = model.without(removed_blocks) if removed_blocks else model
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    batch = tokens[None] if single else tokens
    logits, kv, states, attn, _ = forward_tokens(view, batch, keep_trace=True, keep_attention=True)
    stats = AttentionStats(attn, n_samples=batch.shape[0], n_tokens=batch.shape[1])
    trace = HiddenTrace(states, view.layer_ids)
    return PrefillOutput(logits[0] if single else logits, trace, kv, stats)


def decode_step(model: TransformerModel, token: int, kv: KVCache,
                retained_indices_per_layer: dict[int, Iterable[int]] | None = None,
                removed_blocks=()):
    """Append one token to a single-sequence cache and return its logits.

    Layers named in ``retained_indices_per_layer`` attend only to the listed
    prefill positions plus every decode-generated entry.
    """
    view = model.without(removed_blocks) if removed_blocks else model
    retained = None
    if retained_indices_per_layer:
        retained = {}
        for lid, idx in retained_indices_per_layer.items():
            idx = np.asarray(sorted(idx), dtype=np.int64)
            if idx.size and (idx[0] < 0 or idx[-1] >= kv.n_prefill):
                raise ValueError(f"retained index out of range for layer {lid}")
            retained[lid] = idx
    logits, new_kv, *_ = forward_tokens(view, np.array([[token]]), past=kv, retained=retained)
    return logits[0, -1], new_kv


def collect_attention_stats(model: TransformerModel, sequences, batch_size: int = 64) -> AttentionStats:
    sequences = np.asarray(sequences)
    stats = AttentionStats({})
    for i in range(0, len(sequences), batch_size):
        stats = stats.merge(forward_prefill(model, sequences[i:i + batch_size]).attention)
    return stats


def collect_trace(model: TransformerModel, sequences, removed_blocks=()) -> HiddenTrace:
    return forward_prefill(model, np.asarray(sequences), removed_blocks).trace


def greedy_generate(model: TransformerModel, prompt, steps: int) -> list[int]:
    """Reference generation without any pruning."""
    out = forward_prefill(model, prompt)
    kv = out.kv
    token = int(np.argmax(out.logits[-1]))
    transcript = [token]
    for _ in range(steps - 1):
        logits, kv = decode_step(model, token, kv)
        token = int(np.argmax(logits))
        transcript.append(token)
    return transcript[:steps]

