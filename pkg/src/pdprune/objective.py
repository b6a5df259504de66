"""Calibration accuracy of a model under a removal plan."""

from __future__ import annotations

import numpy as np

from .model import TransformerModel, _check_tokens, _logits, block_forward, forward_tokens
from .plan import as_stage_plan, build_view

MODES = ("unified", "prefill", "decode")


def _correct(logits, targets) -> int:
    return int(np.sum(np.argmax(logits, axis=-1) == targets))


def accuracy(view: TransformerModel, tokens, batch_size: int = 128) -> float:
    """Top-1 next-token accuracy of a single model view over every position."""
    tokens = np.asarray(tokens)
    hits = 0
    for i in range(0, len(tokens), batch_size):
        chunk = tokens[i:i + batch_size]
        logits = forward_tokens(view, chunk)[0]
        hits += _correct(logits[:, :-1], chunk[:, 1:])
    return hits / (tokens.shape[0] * (tokens.shape[1] - 1))


class PrefixCache:
    """Hidden states of calibration batches keyed by the block prefix that made them.

    Views produced from one model share :class:`Block` objects, and blocks
    hash by identity, so two views agree on a prefix exactly when they run
    the same block objects under the same layer ids.
    """

    def __init__(self, max_entries: int = 4096):
        self.max_entries = max_entries
        self.store: dict[tuple, np.ndarray] = {}

    def hidden(self, view: TransformerModel, tokens, batch_key) -> np.ndarray:
        h = view.embed[tokens]
        positions = np.arange(tokens.shape[1])
        key: tuple = (batch_key,)
        for lid, blk in zip(view.layer_ids, view.blocks):
            key = key + ((lid, blk),)
            cached = self.store.get(key)
            if cached is None:
                cached = block_forward(blk, h, positions)[0]
                if len(self.store) < self.max_entries:
                    self.store[key] = cached
            h = cached
        return h


def cached_accuracy(view: TransformerModel, tokens, cache: PrefixCache, batch_size: int = 128) -> float:
    """Same value as :func:`accuracy`, reusing activations of shared block prefixes."""
    tokens = _check_tokens(view, np.asarray(tokens))
    hits = 0
    for i in range(0, len(tokens), batch_size):
        chunk = tokens[i:i + batch_size]
        h = cache.hidden(view, chunk, (i, id(tokens)))
        hits += _correct(_logits(view, h)[:, :-1], chunk[:, 1:])
    return hits / (tokens.shape[0] * (tokens.shape[1] - 1))


def disaggregated_accuracy(prefill_view: TransformerModel, decode_view: TransformerModel,
                           tokens, prompt_len: int | None = None, batch_size: int = 128) -> float:
    """Accuracy when the prompt runs on ``prefill_view`` and the rest on ``decode_view``.

    The decode view reuses the prefill cache layer by layer (teacher forced),
    so it only sees the prompt through keys and values the prefill view made.
    """
    tokens = np.asarray(tokens)
    T = tokens.shape[1]
    P = T // 2 if prompt_len is None else prompt_len
    if not 1 <= P < T:
        raise ValueError(f"prompt length must lie in [1, {T - 1}]")
    hits = 0
    for i in range(0, len(tokens), batch_size):
        chunk = tokens[i:i + batch_size]
        logits_p, kv, *_ = forward_tokens(prefill_view, chunk[:, :P])
        hits += _correct(logits_p, chunk[:, 1:P + 1])
        if P < T - 1:
            logits_d = forward_tokens(decode_view, chunk[:, P:T - 1], past=kv)[0]
            hits += _correct(logits_d, chunk[:, P + 1:])
    return hits / (tokens.shape[0] * (T - 1))


def objective_accuracy(model: TransformerModel, calibration, plan=(), mode: str = "unified",
                       merged=None, prompt_len: int | None = None,
                       cache: PrefixCache | None = None) -> float:
    """Mean top-1 accuracy on ``calibration`` with ``plan`` applied.

    ``unified`` runs every position through the decode-stage view (the whole
    plan), ``prefill`` through the prefill-stage view, and ``decode`` splits
    each sequence into a prompt handled by the prefill view and a
    continuation handled by the decode view.
    """
    calibration = np.asarray(calibration)
    if calibration.ndim != 2 or calibration.shape[0] == 0:
        raise ValueError("calibration set is empty")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    plan = as_stage_plan(plan)
    single = accuracy if cache is None else (lambda v, t: cached_accuracy(v, t, cache))
    if mode == "unified":
        return single(build_view(model, plan.decode_removals, merged), calibration)
    if mode == "prefill":
        return single(build_view(model, plan.prefill_removals, merged), calibration)
    plan.check()
    return disaggregated_accuracy(build_view(model, plan.prefill_removals, merged),
                                  build_view(model, plan.decode_removals, merged),
                                  calibration, prompt_len)


class CalibrationObjective:
    """Callable objective for the search: solution -> calibration accuracy."""

    def __init__(self, model: TransformerModel, calibration, mode: str = "unified",
                 merged=None, prompt_len: int | None = None):
        self.model = model
        self.calibration = np.asarray(calibration)
        self.mode = mode
        self.merged = merged
        self.prompt_len = prompt_len
        self.cache = PrefixCache()
        self.calls = 0

    def __call__(self, plan) -> float:
        self.calls += 1
        return objective_accuracy(self.model, self.calibration, plan, self.mode, self.merged,
                                  self.prompt_len, cache=self.cache)
