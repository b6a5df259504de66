"""Hand-written reverse-mode gradients for blocks and whole models, plus Adam."""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .model import (BLOCK_PARAMS, Block, BlockCache, TransformerModel, apply_rope, block_forward,
                    forward_tokens, rms_norm, softmax)


def _rms_norm_backward(dout, x, inv, gain):
    n = x * inv
    dgain = np.sum(dout * n, axis=tuple(range(dout.ndim - 1)))
    dn = dout * gain
    dx = inv * (dn - n * np.mean(dn * n, axis=-1, keepdims=True))
    return dx, dgain


def block_backward(blk: Block, cache: BlockCache, dy):
    """Backpropagate ``dy`` through a block run without past KV entries.

    Returns ``(dx, grads)`` with one gradient array per block parameter.
    """
    B, T, d = dy.shape
    H = blk.n_heads
    hd = d // H
    g = {}

    # MLP branch
    g["w2"] = cache.s.reshape(-1, cache.s.shape[-1]).T @ dy.reshape(-1, d)
    ds = dy @ blk.w2.T
    du = ds * cache.sig * (1.0 + cache.u * (1.0 - cache.sig))
    g["w1"] = cache.c.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
    dc = du @ blk.w1.T
    dx2_norm, g["norm2"] = _rms_norm_backward(dc, cache.x2, cache.inv2, blk.norm2)
    dx2 = dy + dx2_norm

    # attention branch
    g["wo"] = cache.o.reshape(-1, d).T @ dx2.reshape(-1, d)
    do = (dx2 @ blk.wo.T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)    # [B,H,T,hd]
    vh = cache.v.transpose(0, 2, 1, 3)                                  # [B,H,S,hd]
    dprobs = do @ vh.transpose(0, 1, 3, 2)
    dv = (cache.probs.transpose(0, 1, 3, 2) @ do).transpose(0, 2, 1, 3)
    dscores = cache.probs * (dprobs - np.sum(dprobs * cache.probs, axis=-1, keepdims=True))
    dscores = dscores / np.sqrt(hd)
    qh = cache.q.transpose(0, 2, 1, 3)
    kh = cache.k.transpose(0, 2, 1, 3)
    dq_rot = (dscores @ kh).transpose(0, 2, 1, 3)
    dk_rot = (dscores.transpose(0, 1, 3, 2) @ qh).transpose(0, 2, 1, 3)
    dq = apply_rope(dq_rot, cache.cos, cache.sin, inverse=True).reshape(B, T, d)
    dk = apply_rope(dk_rot, cache.cos, cache.sin, inverse=True).reshape(B, T, d)
    dv = dv.reshape(B, T, d)

    a2 = cache.a.reshape(-1, d)
    g["wq"] = a2.T @ dq.reshape(-1, d)
    g["wk"] = a2.T @ dk.reshape(-1, d)
    g["wv"] = a2.T @ dv.reshape(-1, d)
    da = dq @ blk.wq.T + dk @ blk.wk.T + dv @ blk.wv.T
    dx_norm, g["norm1"] = _rms_norm_backward(da, cache.x, cache.inv1, blk.norm1)
    return dx2 + dx_norm, {k: g[k] for k in BLOCK_PARAMS}


def block_loss_and_grad(block_params: Block, inputs, targets, positions=None):
    """Mean squared error of ``block(inputs)`` against ``targets`` and its gradients."""
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.shape != targets.shape or inputs.ndim != 3:
        raise ValueError(f"inputs {inputs.shape} and targets {targets.shape} must be equal [B, T, d]")
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
        raise NumericError("non-finite activations")
    if positions is None:
        positions = np.arange(inputs.shape[1])
    y, _, _, cache = block_forward(block_params, inputs, positions)
    resid = y - targets
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise NumericError("non-finite block loss")
    _, grads = block_backward(block_params, cache, 2.0 * resid / resid.size)
    return loss, grads


def next_token_loss(logits, tokens):
    """Mean cross-entropy of predicting ``tokens[:, 1:]`` from ``logits[:, :-1]``."""
    z = logits[:, :-1]
    tgt = tokens[:, 1:]
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z - zmax), axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    return float(np.mean(lse - picked))


def backward_from_logits(model: TransformerModel, tokens, states, caches, dz, stop_at=None):
    """Backpropagate a logits gradient ``dz`` through the final norm and blocks.

    ``stop_at`` names a layer id below which nothing is propagated (its
    gradients are still produced). Returns gradients keyed like
    :meth:`TransformerModel.arrays`; the embedding is skipped when stopping early.
    """
    grads = {}
    h_last = states[-1]
    zn, inv = rms_norm(h_last, model.final_norm)
    grads["unembed"] = zn.reshape(-1, zn.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
    dh, grads["final_norm"] = _rms_norm_backward(dz @ model.unembed.T, h_last, inv, model.final_norm)
    for lid, blk, cache in reversed(list(zip(model.layer_ids, model.blocks, caches))):
        dh, bg = block_backward(blk, cache, dh)
        for k, v in bg.items():
            grads[f"block{lid}.{k}"] = v
        if lid == stop_at:
            return grads
    dembed = np.zeros_like(model.embed)
    np.add.at(dembed, np.asarray(tokens).reshape(-1), dh.reshape(-1, dh.shape[-1]))
    grads["embed"] = dembed
    return grads


def model_loss_and_grad(model: TransformerModel, tokens):
    """Next-token cross-entropy over a [B, T] batch and gradients for every array.

    Gradients come back keyed like :meth:`TransformerModel.arrays`.
    """
    tokens = np.asarray(tokens)
    B, T = tokens.shape
    logits, _, states, _, caches = forward_tokens(model, tokens, keep_trace=True, keep_caches=True)
    loss = next_token_loss(logits, tokens)

    dz = softmax(logits)
    dz[:, -1] = 0.0
    np.put_along_axis(dz[:, :-1], tokens[:, 1:, None],
                      np.take_along_axis(dz[:, :-1], tokens[:, 1:, None], axis=-1) - 1.0, axis=-1)
    dz /= B * (T - 1)
    return loss, backward_from_logits(model, tokens, states, caches, dz)


class Adam:
    """Adam over a dict of named arrays; returns new arrays, never mutates inputs."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            out[name] = (p - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        return out
