"""Block redundancy, the consecutive-pair metric, and the prune/distill partition."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError
from .model import HiddenTrace

FORMAT_VERSION = 1
DEFAULT_D_T = 0.95


@dataclass
class RedundancyProfile:
    r: np.ndarray
    d: np.ndarray

    @property
    def L(self) -> int:
        return len(self.r)


@dataclass
class SetPartition:
    p_initial: list[int]
    distillation: list[tuple[int, int]]
    pair_metric: dict[tuple[int, int], float]
    p_final: list[int]
    d_T: float = DEFAULT_D_T
    k: int | None = None
    extra: dict = field(default_factory=dict)


def mean_cosine(a, b) -> float:
    """Mean cosine similarity between matching rows of ``a`` and ``b``.

    The last axis is the feature axis; every other axis (samples, positions)
    is averaged over.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, np.shape(a)[-1])
    b = np.asarray(b, dtype=np.float64).reshape(-1, np.shape(b)[-1])
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("zero-norm hidden vector")
    cos = np.sum(a * b, axis=-1) / (na * nb)
    return float(np.clip(np.mean(cos), -1.0, 1.0))


def _states(trace):
    states = trace.states if isinstance(trace, HiddenTrace) else list(trace)
    if len(states) < 2:
        raise ValueError("trace must hold at least one block")
    return states


def compute_redundancy(trace) -> np.ndarray:
    """``r[i]`` = mean cos(input of block i, output of block i)."""
    h = _states(trace)
    return np.array([mean_cosine(h[i], h[i + 1]) for i in range(len(h) - 1)])


def compute_pair_metric(trace) -> np.ndarray:
    """``d[i]`` for the consecutive pair (i, i+1), averaged like :func:`compute_redundancy`."""
    h = _states(trace)
    L = len(h) - 1
    if L < 2:
        raise ValueError("pair metric needs at least two blocks")
    d = []
    for i in range(L - 1):
        outer = mean_cosine(h[i], h[i + 2])
        inner = max(mean_cosine(h[i], h[i + 1]), mean_cosine(h[i + 1], h[i + 2]))
        d.append(0.5 * (outer + inner))
    return np.array(d)


def redundancy_profile(trace) -> RedundancyProfile:
    return RedundancyProfile(compute_redundancy(trace), compute_pair_metric(trace))


def norm_profile(trace) -> np.ndarray:
    """Mean L2 norm of each hidden state (diagnostic only)."""
    return np.array([float(np.mean(np.linalg.norm(h, axis=-1))) for h in _states(trace)])


def _top_indices(values, count):
    # stable sort on -value keeps lower indices first among ties
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return [int(i) for i in order[:count]]


def build_initial_pruning_set(r, k: int) -> list[int]:
    L = len(r)
    if not 1 <= k <= L - 1:
        raise ValueError(f"k must lie in [1, {L - 1}], got {k}")
    return sorted(_top_indices(r, math.ceil(k / 2)))


def build_distillation_set(d, d_T: float, p_initial) -> list[tuple[int, int]]:
    """Pick disjoint consecutive pairs whose metric reaches ``d_T``.

    Pairs touching ``p_initial`` are dropped. When two qualifying pairs share
    a block, the larger metric wins (lower index on ties); candidates are
    resolved greedily in that priority order.
    """
    if not 0 < d_T <= 1:
        raise ValueError(f"d_T must lie in (0, 1], got {d_T}")
    blocked = set(p_initial)
    candidates = [i for i, di in enumerate(d)
                  if di >= d_T and i not in blocked and i + 1 not in blocked]
    candidates.sort(key=lambda i: (-d[i], i))
    used: set[int] = set()
    pairs = []
    for i in candidates:
        if i in used or i + 1 in used:
            continue
        used.update((i, i + 1))
        pairs.append((i, i + 1))
    return sorted(pairs)


def build_final_pruning_set(distillation, L: int) -> list[int]:
    covered = {b for pair in distillation for b in pair}
    return [i for i in range(L) if i not in covered]


def partition(profile: RedundancyProfile, k: int, d_T: float = DEFAULT_D_T) -> SetPartition:
    p_initial = build_initial_pruning_set(profile.r, k)
    pairs = build_distillation_set(profile.d, d_T, p_initial)
    return SetPartition(
        p_initial=p_initial,
        distillation=pairs,
        pair_metric={p: float(profile.d[p[0]]) for p in pairs},
        p_final=build_final_pruning_set(pairs, profile.L),
        d_T=d_T,
        k=k,
    )


def analysis_to_json(profile: RedundancyProfile, part: SetPartition, **extra) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "L": profile.L,
        "r": [float(x) for x in profile.r],
        "d": [float(x) for x in profile.d],
        "k": part.k,
        "d_T": part.d_T,
        "p_initial": list(part.p_initial),
        "distillation": [[i, j] for i, j in part.distillation],
        "p_final": list(part.p_final),
    }
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def analysis_from_json(text: str) -> tuple[RedundancyProfile, SetPartition, dict]:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported analysis format_version {doc.get('format_version')}")
    profile = RedundancyProfile(np.array(doc["r"], dtype=np.float64), np.array(doc["d"], dtype=np.float64))
    pairs = [tuple(p) for p in doc["distillation"]]
    part = SetPartition(
        p_initial=list(doc["p_initial"]),
        distillation=pairs,
        pair_metric={p: float(profile.d[p[0]]) for p in pairs},
        p_final=list(doc["p_final"]),
        d_T=doc["d_T"],
        k=doc.get("k"),
    )
    return profile, part, doc
