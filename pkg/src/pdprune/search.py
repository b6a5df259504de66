"""Annealed search over block-removal combinations, a brute-force oracle,
and prefill/decode stage assignment."""

from __future__ import annotations

import itertools
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .analysis import SetPartition
from .errors import InfeasibleError, TooLargeError
from .plan import RemovalElement, StagePlan, elements_disjoint, sort_elements

FORMAT_VERSION = 1
WEIGHT_FLOOR = 1e-6
DEFAULT_THRESHOLD = 0.03
BRUTE_FORCE_CAP = 10 ** 6

Solution = tuple[RemovalElement, ...]
Objective = Callable[[Solution], float]


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """PCG64 stream for ``name`` derived from ``seed``.

    Streams are split by SeedSequence spawn keys: the key is the CRC32 of
    the stream name, so adding a stream never shifts another one.
    """
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))))


@dataclass(frozen=True)
class AnnealingSchedule:
    T0: float = 15.0
    alpha: float = 0.85
    T_min: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.T_min <= 0 or self.T0 <= 0:
            raise ValueError("temperatures must be positive")

    def temperature(self, n: int) -> float:
        return self.T0 * self.alpha ** n

    def iterations(self) -> int:
        """Smallest n with T0 * alpha**n < T_min."""
        n = 0
        while self.temperature(n) >= self.T_min:
            n += 1
        return n


@dataclass
class SearchState:
    universe: Solution
    current: Solution
    f_current: float
    best: Solution
    f_best: float
    T: float
    iteration: int = 0

    @property
    def unremoved(self) -> Solution:
        cur = set(self.current)
        return tuple(e for e in self.universe if e not in cur)


@dataclass
class SearchResult:
    best: Solution
    best_f: float
    initial: Solution
    initial_f: float
    log: list[dict] = field(default_factory=list)
    evaluations: int = 0

    @property
    def iterations(self) -> int:
        return len(self.log)


def candidate_elements(partition: SetPartition, r) -> Solution:
    """Every removal element the partition allows, ordered by block index."""
    elems = [RemovalElement.distill(i, r) for i, _ in partition.distillation]
    elems += [RemovalElement.prune(i, r) for i in partition.p_final]
    return sort_elements(elems)


def build_initial_solution(partition: SetPartition, k: int, r) -> Solution:
    half = math.ceil(k / 2)
    if len(partition.p_initial) != half:
        raise ValueError(f"partition was built for a different k (|P_initial|={len(partition.p_initial)})")
    n_available = len(partition.distillation) + len(partition.p_final)
    if k < 1 or n_available < k:
        raise InfeasibleError(f"cannot remove {k} blocks with {n_available} elements")
    chosen = [RemovalElement.prune(i, r) for i in partition.p_initial]
    rest = k - half
    pairs = sorted(partition.distillation, key=lambda p: (-partition.pair_metric[p], p[0]))
    chosen += [RemovalElement.distill(i, r) for i, _ in pairs[:rest]]
    short = rest - min(rest, len(pairs))
    if short:
        pool = [i for i in partition.p_final if i not in set(partition.p_initial)]
        pool.sort(key=lambda i: (-r[i], i))
        chosen += [RemovalElement.prune(i, r) for i in pool[:short]]
    if not elements_disjoint(chosen):
        raise InfeasibleError("initial solution is not block-disjoint")
    return sort_elements(chosen)


def selection_probabilities(elements: Sequence[RemovalElement]) -> np.ndarray:
    if not elements:
        raise ValueError("no elements to choose from")
    w = np.maximum(np.array([e.weight for e in elements], dtype=np.float64), WEIGHT_FLOOR)
    return w / w.sum()


def propose_neighbor(state: SearchState, rng: np.random.Generator, retries: int = 16) -> Solution | None:
    """Swap one uniformly chosen removed element for a weighted unremoved one.

    Returns ``None`` when no block-disjoint swap turns up within ``retries``.
    """
    unremoved = state.unremoved
    if not unremoved or not state.current:
        return None
    probs = selection_probabilities(unremoved)
    for _ in range(retries):
        out = int(rng.integers(len(state.current)))
        inc = unremoved[int(rng.choice(len(unremoved), p=probs))]
        candidate = state.current[:out] + state.current[out + 1:] + (inc,)
        if elements_disjoint(candidate):
            return sort_elements(candidate)
    return None


def acceptance_probability(f_s: float, f_candidate: float, T: float) -> float:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if f_candidate >= f_s:
        return 1.0
    return math.exp(-(f_s - f_candidate) / T)


class CachedObjective:
    """Memoises an objective on the (sorted) solution."""

    def __init__(self, fn: Objective):
        self.fn = fn
        self.cache: dict[Solution, float] = {}

    def __call__(self, solution: Solution) -> float:
        key = sort_elements(solution)
        if key not in self.cache:
            self.cache[key] = float(self.fn(key))
        return self.cache[key]


def run_annealing(partition: SetPartition, k: int, schedule: AnnealingSchedule,
                  objective: Objective, r) -> SearchResult:
    """Annealed swap search; returns the best solution ever evaluated."""
    universe = candidate_elements(partition, r)
    initial = build_initial_solution(partition, k, r)
    f0 = objective(initial)
    state = SearchState(universe, initial, f0, initial, f0, schedule.T0)
    rng = rng_stream(schedule.seed, "annealing")
    result = SearchResult(best=initial, best_f=f0, initial=initial, initial_f=f0, evaluations=1)

    n = 0
    while schedule.temperature(n) >= schedule.T_min:
        state.T = schedule.temperature(n)
        state.iteration = n
        candidate = propose_neighbor(state, rng)
        entry = {"iteration": n, "T": state.T, "candidate": None, "f": None,
                 "accepted": False, "best_f": state.f_best}
        if candidate is not None:
            f_c = objective(candidate)
            result.evaluations += 1
            p = acceptance_probability(state.f_current, f_c, state.T)
            accepted = p >= 1.0 or rng.random() < p
            if accepted:
                state.current, state.f_current = candidate, f_c
            if f_c > state.f_best:
                state.best, state.f_best = candidate, f_c
            entry.update(candidate=[str(e) for e in candidate], f=f_c, accepted=bool(accepted),
                         best_f=state.f_best)
        result.log.append(entry)
        n += 1

    result.best, result.best_f = state.best, state.f_best
    return result


def brute_force_optimum(partition: SetPartition, k: int, objective: Objective, r,
                        cap: int = BRUTE_FORCE_CAP) -> tuple[Solution, float]:
    """Exhaustive maximiser over all block-disjoint k-subsets of elements.

    Ties keep the lexicographically smallest element tuple.
    """
    universe = candidate_elements(partition, r)
    if k < 1 or k > len(universe):
        raise InfeasibleError(f"no {k}-element subsets of {len(universe)} elements")
    total = math.comb(len(universe), k)
    if total > cap:
        raise TooLargeError(f"{total} combinations exceed the cap of {cap}")
    best, best_f = None, -math.inf
    for combo in itertools.combinations(universe, k):
        if not elements_disjoint(combo):
            continue
        f = objective(combo)
        if f > best_f:
            best, best_f = combo, f
    if best is None:
        raise InfeasibleError("no feasible combination")
    return best, best_f


def assign_stages(best: Solution, objective: Callable[[StagePlan], float],
                  threshold: float = DEFAULT_THRESHOLD, log: list | None = None) -> StagePlan:
    """Keep an element out of prefill when decode-only removal gains more than ``threshold``.

    Elements are visited in ascending block order; each comparison uses the
    assignments already made for earlier elements.
    """
    decode = sort_elements(best)
    prefill = list(decode)
    for e in decode:
        f_both = objective(StagePlan(tuple(prefill), decode, threshold))
        trial = tuple(x for x in prefill if x != e)
        f_decode_only = objective(StagePlan(trial, decode, threshold))
        excluded = f_decode_only - f_both > threshold
        if excluded:
            prefill = list(trial)
        if log is not None:
            log.append({"element": str(e), "f_both": f_both, "f_decode_only": f_decode_only,
                        "decode_only": bool(excluded)})
    plan = StagePlan(tuple(prefill), decode, threshold)
    plan.check()
    return plan


def plan_to_json(plan: StagePlan, *, k: int, schedule: AnnealingSchedule | None = None,
                 result: SearchResult | None = None, **extra) -> str:
    prefill = set(plan.prefill_removals)
    doc = {
        "format_version": FORMAT_VERSION,
        "k": k,
        "threshold": plan.threshold,
        "elements": [dict(e.to_json(), prefill=e in prefill, decode=True)
                     for e in plan.decode_removals],
    }
    if schedule is not None:
        doc["schedule"] = {"T0": schedule.T0, "alpha": schedule.alpha, "T_min": schedule.T_min}
        doc["seed"] = schedule.seed
    if result is not None:
        doc["best_f"] = result.best_f
        doc["initial_f"] = result.initial_f
        doc["iterations"] = result.iterations
        doc["audit_log"] = result.log
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def plan_from_json(text: str) -> tuple[StagePlan, dict]:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported plan format_version {doc.get('format_version')}")
    elems = [(RemovalElement.from_json(e), e["prefill"]) for e in doc["elements"]]
    plan = StagePlan(tuple(e for e, pre in elems if pre), tuple(e for e, _ in elems),
                     doc.get("threshold", DEFAULT_THRESHOLD))
    plan.check()
    return plan, doc
