"""Seeded synthetic calibration corpus.

Sequences come from a fixed order-2 Markov chain: with probability
``concentration`` the next token is ``table[parity(prev2), prev1]``, otherwise
it is uniform. A model has to look two tokens back to beat a bigram model,
which keeps next-token accuracy informative for the pruning search.
"""

from __future__ import annotations

import numpy as np

CHAIN_SEED = 0


def markov_tables(vocab: int, chain_seed: int = CHAIN_SEED) -> np.ndarray:
    rng = np.random.default_rng([chain_seed, vocab])
    return np.stack([rng.permutation(vocab), rng.permutation(vocab)])


def generate_calibration(seed: int, n_samples: int, length: int, vocab: int,
                         concentration: float = 0.9, chain_seed: int = CHAIN_SEED) -> np.ndarray:
    """Return an ``[n_samples, length]`` int64 array of token sequences."""
    if length < 2:
        raise ValueError(f"sequence length must be >= 2, got {length}")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    table = markov_tables(vocab, chain_seed)
    rng = np.random.default_rng(seed)
    seqs = np.empty((n_samples, length), dtype=np.int64)
    if n_samples == 0:
        return seqs
    seqs[:, :2] = rng.integers(0, vocab, size=(n_samples, 2))
    for t in range(2, length):
        follow = rng.random(n_samples) < concentration
        noise = rng.integers(0, vocab, size=n_samples)
        det = table[seqs[:, t - 2] % 2, seqs[:, t - 1]]
        seqs[:, t] = np.where(follow, det, noise)
    return seqs
