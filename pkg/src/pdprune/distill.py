"""Merging a consecutive block pair into a single trained block."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import MergedRecord
from .errors import TrainingDivergenceError
from .grad import Adam, backward_from_logits, block_loss_and_grad
from .model import Block, TransformerModel, forward_tokens, softmax
from .plan import RemovalElement, StagePlan, build_view, stage_views

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-3
DEFAULT_STEPS = 200


def init_merged_block(model: TransformerModel, pair: tuple[int, int], r) -> Block:
    """Copy of the less redundant block of ``pair`` (the first one on ties)."""
    i, j = pair
    if j != i + 1:
        raise ValueError(f"pair {pair} is not consecutive")
    source = i if r[i] <= r[j] else j
    return model.block(source).copy()


def pair_source(pair, r) -> int:
    return pair[0] if r[pair[0]] <= r[pair[1]] else pair[1]


def capture_pair_activations(model: TransformerModel, calibration, pair):
    """Inputs of block i and outputs of block i+1 over the calibration set."""
    i, j = pair
    _, _, states, _, _ = forward_tokens(model, np.asarray(calibration), keep_trace=True)
    pos_i, pos_j = model.layer_ids.index(i), model.layer_ids.index(j)
    if pos_j != pos_i + 1:
        raise ValueError(f"blocks {pair} are not adjacent in this model")
    return states[pos_i], states[pos_j + 1]


@dataclass
class DistillJob:
    pair: tuple[int, int]
    inputs: np.ndarray
    targets: np.ndarray
    init: Block
    source: int
    lr: float = DEFAULT_LR
    epochs: int = DEFAULT_STEPS
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ValueError("teacher inputs and targets differ in shape")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def distill_pair(job: DistillJob) -> MergedRecord:
    """Train the merged block on (h_{i-1} -> h_{i+1}) with MSE; keep the best checkpoint."""
    if job.inputs.shape[0] == 0:
        raise ValueError("no teacher activations")
    blk = job.init
    init_mse, _ = block_loss_and_grad(blk, job.inputs, job.targets)
    best, best_mse = blk, init_mse
    if job.epochs == 0:
        return MergedRecord(job.pair, job.source, blk, 0, init_mse, init_mse)
    rng = np.random.default_rng(job.seed)
    opt = Adam(lr=job.lr)
    params = blk.params()
    n = job.inputs.shape[0]
    bs = n if job.batch_size is None else job.batch_size
    for epoch in range(job.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            loss, grads = block_loss_and_grad(blk, job.inputs[idx], job.targets[idx])
            params = opt.step(params, grads)
            blk = blk.with_params(**params)
        mse, _ = block_loss_and_grad(blk, job.inputs, job.targets)
        if not np.isfinite(mse):
            raise TrainingDivergenceError(f"distillation of {job.pair} diverged at epoch {epoch}")
        if mse < best_mse:
            best, best_mse = blk, mse
    log.debug("distilled %s: mse %.5g -> %.5g", job.pair, init_mse, best_mse)
    return MergedRecord(job.pair, job.source, best, job.epochs, init_mse, best_mse)


def make_job(model: TransformerModel, calibration, pair, r, **kw) -> DistillJob:
    inputs, targets = capture_pair_activations(model, calibration, pair)
    return DistillJob(tuple(pair), inputs, targets, init_merged_block(model, pair, r),
                      pair_source(pair, r), **kw)


def _kl_loss_and_grad(student: TransformerModel, tokens, teacher_probs, merged_id):
    logits, _, states, _, caches = forward_tokens(student, tokens, keep_trace=True, keep_caches=True)
    p = softmax(logits)
    n = logits.shape[0] * logits.shape[1]
    loss = float(np.sum(teacher_probs * (np.log(teacher_probs + 1e-300) - np.log(p + 1e-300))) / n)
    grads = backward_from_logits(student, tokens, states, caches, (p - teacher_probs) / n, stop_at=merged_id)
    return loss, grads


def distill_pair_logits(model: TransformerModel, calibration, pair, r, lr: float = DEFAULT_LR,
                        epochs: int = DEFAULT_STEPS) -> MergedRecord:
    """Alternative objective: KL between full-model and spliced-model next-token distributions."""
    tokens = np.asarray(calibration)
    teacher = softmax(forward_tokens(model, tokens)[0])
    source = pair_source(pair, r)
    blk = init_merged_block(model, pair, r)
    elem = RemovalElement.distill(pair[0], r)

    def student(b):
        return build_view(model, [elem], {tuple(pair): b})

    init_loss, _ = _kl_loss_and_grad(student(blk), tokens, teacher, source)
    best, best_loss = blk, init_loss
    opt = Adam(lr=lr)
    params = blk.params()
    for epoch in range(epochs):
        loss, grads = _kl_loss_and_grad(student(blk), tokens, teacher, source)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"distillation of {pair} diverged at epoch {epoch}")
        if loss < best_loss:
            best, best_loss = blk, loss
        params = opt.step(params, {k: grads[f"block{source}.{k}"] for k in params})
        blk = blk.with_params(**params)
    final_loss, _ = _kl_loss_and_grad(student(blk), tokens, teacher, source)
    if final_loss < best_loss:
        best, best_loss = blk, final_loss
    return MergedRecord(tuple(pair), source, best, epochs, init_loss, best_loss)


def apply_distillation(model: TransformerModel, plan: StagePlan, merged) -> tuple[TransformerModel, TransformerModel]:
    """Prefill and decode views with trained merged blocks spliced in.

    ``merged`` maps pairs to blocks or is a list of :class:`MergedRecord`.
    """
    if isinstance(merged, (list, tuple)):
        merged = {rec.pair: rec.block for rec in merged}
    return stage_views(model, plan, merged, strict=True)
