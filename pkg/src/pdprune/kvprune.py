"""Token-aware KV-cache pruning: layer selection and transfer-volume arithmetic.

Selected layers keep only the first and last ``floor(p * N)`` prefill
entries when the cache is shipped to the decode node. Layers are eligible
when every head puts at least ``gamma`` of its attention on those entries,
and eligible layers are ranked by ``rho = mu * (1 - sigma / (mu + eps))`` of
their head scores.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .errors import ConsistencyError
from .model import AttentionStats
from .plan import RemovalElement, StagePlan, as_stage_plan, surviving_layer_ids

FORMAT_VERSION = 1
DEFAULT_P = 0.3
DEFAULT_GAMMA = 0.75
EPSILON = 1e-12
# absorbs representation error in p * N, e.g. 0.29 * 100 = 28.999999999999996
_FLOOR_SLACK = 1e-9


class DegenerateRetentionWarning(UserWarning):
    pass


class SelectionTruncatedWarning(UserWarning):
    pass


def keep_count(N: int, p: float) -> int:
    """floor(p * N), the number of entries kept at each end."""
    if not 0 <= p < 0.5:
        raise ValueError(f"p must lie in [0, 0.5), got {p}")
    return math.floor(p * N + _FLOOR_SLACK)


def head_score(A, p: float, N: int | None = None) -> float:
    """Attention mass on the first and last floor(p * N) positions."""
    A = np.asarray(A, dtype=np.float64)
    N = len(A) if N is None else N
    m = keep_count(N, p)
    if m == 0:
        return 0.0
    return float(np.sum(A[:m]) + np.sum(A[N - m:N]))


def filter_layers(scores: Mapping[int, Iterable[float]], gamma: float) -> list[int]:
    return sorted(lid for lid, s in scores.items() if np.all(np.asarray(s) >= gamma))


def layer_score(head_scores, epsilon: float = EPSILON) -> float:
    s = np.asarray(head_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("layer has no heads")
    mu = float(np.mean(s))
    sigma = float(np.std(s))
    return mu * (1.0 - sigma / (mu + epsilon))


def retention_indices(N: int, p: float) -> np.ndarray:
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    m = keep_count(N, p)
    if m == 0:
        warnings.warn(f"floor({p} * {N}) = 0: no prefill entries retained",
                      DegenerateRetentionWarning, stacklevel=2)
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(m), np.arange(N - m, N)]).astype(np.int64)


@dataclass
class KVSelectionPlan:
    p: float = DEFAULT_P
    gamma: float = DEFAULT_GAMMA
    n: int = 0
    selected_layers: tuple[int, ...] = ()
    N: int | None = None
    head_scores: dict[int, list[float]] = field(default_factory=dict)
    layer_scores: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.p < 0.5:
            raise ValueError(f"p must lie in (0, 0.5), got {self.p}")
        self.selected_layers = tuple(sorted(int(x) for x in self.selected_layers))

    def retained_for(self, N: int) -> dict[int, np.ndarray]:
        """Retained prefill positions per selected layer for a prompt of length N."""
        if not self.selected_layers:
            return {}
        idx = retention_indices(N, self.p)
        return {lid: idx for lid in self.selected_layers}

    def to_json(self) -> str:
        doc = {"format_version": FORMAT_VERSION, "p": self.p, "gamma": self.gamma, "n": self.n,
               "selected_layers": list(self.selected_layers), "N": self.N,
               "head_scores": {str(k): v for k, v in self.head_scores.items()},
               "layer_scores": {str(k): v for k, v in self.layer_scores.items()}}
        if self.N is not None:
            m = keep_count(self.N, self.p)
            ranges = [[0, m - 1], [self.N - m, self.N - 1]] if m else []
            doc["retained_ranges"] = {str(l): ranges for l in self.selected_layers}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "KVSelectionPlan":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported kvplan format_version {doc.get('format_version')}")
        return cls(doc["p"], doc["gamma"], doc["n"], tuple(doc["selected_layers"]), doc.get("N"),
                   {int(k): v for k, v in doc.get("head_scores", {}).items()},
                   {int(k): v for k, v in doc.get("layer_scores", {}).items()})


def select_layers(stats: AttentionStats, p: float = DEFAULT_P, gamma: float = DEFAULT_GAMMA,
                  n: int = 0, candidate_layers: Iterable[int] | None = None,
                  epsilon: float = EPSILON) -> KVSelectionPlan:
    """Top-``n`` admissible layers by rho (lower layer id on ties)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    layers = sorted(stats.scores) if candidate_layers is None else sorted(candidate_layers)
    head_scores = {}
    for lid in layers:
        A = stats.scores[lid]
        head_scores[lid] = [head_score(A[h], p) for h in range(A.shape[0])]
    admissible = filter_layers(head_scores, gamma)
    rho = {lid: layer_score(head_scores[lid], epsilon) for lid in layers}
    ranked = sorted(admissible, key=lambda lid: (-rho[lid], lid))
    if n > len(ranked):
        warnings.warn(f"requested {n} layers but only {len(ranked)} pass gamma={gamma}",
                      SelectionTruncatedWarning, stacklevel=2)
    plan = KVSelectionPlan(p, gamma, n, tuple(ranked[:n]), stats.n_tokens or None,
                           head_scores, rho)
    assert all(lid in admissible for lid in plan.selected_layers)
    return plan


# ---------------------------------------------------------------------------
# transfer volume


@dataclass
class TransferScenario:
    n_layers: int
    n_kv_heads: int
    head_dim: int
    dtype_bytes: int
    seq_len: int
    name: str = ""
    prefill_removed: tuple[int, ...] = ()
    decode_removed: tuple[int, ...] = ()
    kv: dict = field(default_factory=dict)
    link: dict = field(default_factory=dict)
    notes: str = ""
    calibrated: bool = False

    def __post_init__(self):
        for f in ("n_layers", "n_kv_heads", "head_dim", "dtype_bytes", "seq_len"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")

    @property
    def bytes_per_token_layer(self) -> int:
        """Bytes of one token's K and V entries in one layer."""
        return 2 * self.n_kv_heads * self.head_dim * self.dtype_bytes

    def stage_plan(self) -> StagePlan:
        return StagePlan(tuple(RemovalElement.prune(i) for i in self.prefill_removed),
                         tuple(RemovalElement.prune(i) for i in self.decode_removed))

    def kv_plan(self) -> KVSelectionPlan | None:
        if not self.kv:
            return None
        return KVSelectionPlan(self.kv["p"], self.kv.get("gamma", DEFAULT_GAMMA),
                               len(self.kv["selected_layers"]), tuple(self.kv["selected_layers"]),
                               self.seq_len)

    @classmethod
    def from_json(cls, text: str) -> "TransferScenario":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported scenario format_version {doc.get('format_version')}")
        return cls(doc["n_layers"], doc["n_kv_heads"], doc["head_dim"], doc["dtype_bytes"],
                   doc["seq_len"], doc.get("name", ""), tuple(doc.get("prefill_removed", ())),
                   tuple(doc.get("decode_removed", ())), doc.get("kv", {}), doc.get("link", {}),
                   doc.get("notes", ""), bool(doc.get("calibrated", False)))


@dataclass(frozen=True)
class TransferVolume:
    bytes_full: int
    bytes_pruned: int

    @property
    def ratio(self) -> float:
        # every shipped layer can round down to zero retained entries
        return self.bytes_full / self.bytes_pruned if self.bytes_pruned else math.inf

    @property
    def exact_ratio(self) -> Fraction:
        return Fraction(self.bytes_full, self.bytes_pruned)


def view_layer_ids(n_layers: int, elements) -> list[int]:
    """Layer ids of an ``n_layers`` model that survive ``elements``."""
    return surviving_layer_ids(range(n_layers), elements)


def transfer_volume(scenario: TransferScenario, stage_plan=None,
                    kv_plan: KVSelectionPlan | None = None) -> TransferVolume:
    """Exact bytes of the unpruned and the pruned prefill-to-decode KV transfer.

    The unpruned volume ships every prefill-view layer in full. The pruned
    volume drops layers the decode view does not run and keeps ``2 floor(pN)``
    tokens in selected layers.
    """
    stage_plan = as_stage_plan(stage_plan or ())
    stage_plan.check()
    N = scenario.seq_len
    per = scenario.bytes_per_token_layer
    prefill_ids = view_layer_ids(scenario.n_layers, stage_plan.prefill_removals)
    decode_ids = view_layer_ids(scenario.n_layers, stage_plan.decode_removals)
    if not decode_ids:
        raise ConsistencyError("decode plan removes every layer")
    if not set(decode_ids) <= set(prefill_ids):
        raise ConsistencyError("decode view runs layers the prefill view does not produce")
    selected = set(kv_plan.selected_layers) if kv_plan is not None else set()
    if any(not 0 <= lid < scenario.n_layers for lid in selected):
        raise ConsistencyError("KV plan selects layers outside the scenario")
    kept = 2 * keep_count(N, kv_plan.p) if kv_plan is not None else N
    full = len(prefill_ids) * N * per
    pruned = sum((kept if lid in selected else N) * per for lid in decode_ids)
    return TransferVolume(full, pruned)
