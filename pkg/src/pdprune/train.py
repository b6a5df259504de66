"""Next-token training of the toy model."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .errors import TrainingDivergenceError
from .grad import Adam, model_loss_and_grad, next_token_loss
from .model import TransformerModel, forward_tokens

log = logging.getLogger(__name__)


def model_from_arrays(model: TransformerModel, arrays: dict[str, np.ndarray]) -> TransformerModel:
    blocks = []
    for lid, blk in zip(model.layer_ids, model.blocks):
        blocks.append(blk.with_params(**{k: arrays[f"block{lid}.{k}"] for k in blk.params()}))
    return replace(model, embed=arrays["embed"], blocks=tuple(blocks),
                   final_norm=arrays["final_norm"], unembed=arrays["unembed"])


def calibration_loss(model: TransformerModel, tokens, batch_size: int = 256) -> float:
    tokens = np.asarray(tokens)
    total = 0.0
    for i in range(0, len(tokens), batch_size):
        chunk = tokens[i:i + batch_size]
        logits = forward_tokens(model, chunk)[0]
        total += next_token_loss(logits, chunk) * len(chunk)
    return total / len(tokens)


def train_model(model: TransformerModel, calibration, epochs: int, lr: float = 1e-2,
                seed: int = 0, batch_size: int = 32) -> TransformerModel:
    """Adam on next-token cross-entropy; returns the lowest-loss checkpoint seen."""
    calibration = np.asarray(calibration)
    if calibration.size == 0:
        raise ValueError("calibration set is empty")
    if epochs == 0:
        return model
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    params = dict(model.arrays())
    best_model, best_loss = model, calibration_loss(model, calibration)
    current = model
    for epoch in range(epochs):
        order = rng.permutation(len(calibration))
        for i in range(0, len(order), batch_size):
            loss, grads = model_loss_and_grad(current, calibration[order[i:i + batch_size]])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")
            params = opt.step(params, grads)
            current = model_from_arrays(current, params)
        epoch_loss = calibration_loss(current, calibration)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")
        log.debug("epoch %d loss %.4f", epoch, epoch_loss)
        if epoch_loss < best_loss:
            best_model, best_loss = current, epoch_loss
    return best_model
