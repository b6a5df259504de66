"""Fast invariant suite behind ``pdprune verify``.

Each check returns a :class:`Check`; the command exits nonzero if any fails.
The checks are smaller versions of the acceptance tests so the CLI stays
interactive (a few seconds).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Callable

import numpy as np

from .analysis import (RedundancyProfile, build_distillation_set, build_final_pruning_set,
                       build_initial_pruning_set, partition, redundancy_profile)
from .bound import error_bound, random_case
from .checkpoint import merged_map
from .grad import block_loss_and_grad
from .kvprune import (TransferScenario, filter_layers, head_score, layer_score, select_layers,
                      transfer_volume)
from .model import AttentionStats, ModelConfig, build_model, collect_trace
from .objective import CalibrationObjective
from .plan import RemovalElement, StagePlan
from .runtime import reference_unified_run, run_two_node
from .search import AnnealingSchedule, assign_stages, brute_force_optimum, run_annealing
from .toy import D_T, K, SCENARIOS, calibration, load_scenario, load_toy, scenario_model


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def check_schedule() -> Check:
    n = AnnealingSchedule(15, 0.85, 0.05).iterations()
    return Check("annealing schedule length", n == 36, f"{n} iterations")


def check_partition(n_profiles: int = 200, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_profiles):
        L = int(rng.integers(3, 12))
        k = int(rng.integers(1, L))
        r = np.round(rng.random(L), 2)
        d = np.round(rng.random(L - 1), 2)
        p0 = build_initial_pruning_set(r, k)
        pairs = build_distillation_set(d, 0.5, p0)
        pf = build_final_pruning_set(pairs, L)
        covered = [b for p in pairs for b in p]
        ok = (len(p0) == math.ceil(k / 2) and len(set(covered)) == len(covered)
              and not set(covered) & set(p0) and sorted(covered + pf) == list(range(L))
              and all(d[i] >= 0.5 for i, _ in pairs))
        bad += not ok
    return Check("set partition invariants", bad == 0, f"{bad} violations in {n_profiles} profiles")


def check_gradients(seed: int = 0, probes: int = 40, eps: float = 1e-6) -> Check:
    model = build_model(ModelConfig(n_blocks=1, d_model=16, n_heads=2, vocab=8, max_seq=8), seed)
    blk = model.blocks[0]
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 5, 16)), rng.standard_normal((2, 5, 16))
    _, grads = block_loss_and_grad(blk, x, y)
    worst = 0.0
    for name, arr in blk.params().items():
        for flat in rng.choice(arr.size, size=min(probes, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += eps
            minus[idx] -= eps
            fd = (block_loss_and_grad(blk.with_params(**{name: plus}), x, y)[0]
                  - block_loss_and_grad(blk.with_params(**{name: minus}), x, y)[0]) / (2 * eps)
            g = grads[name][idx]
            worst = max(worst, abs(g - fd) / max(abs(g) + abs(fd), 1e-10))
    return Check("block gradients vs finite differences", bool(worst < 1e-4), f"max relative error {worst:.2e}")


def check_error_bound(n_cases: int = 100, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = sum(err > b for err, b in (error_bound(random_case(rng, scale=s))
                                      for s in np.resize([1e-4, 1e-3, 1e-2], n_cases)))
    return Check("attention error bound", bad == 0, f"{bad} violations in {n_cases} cases")


def check_kv_selection(n_stats: int = 200, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_stats):
        n_layers, H, N = int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(4, 20))
        scores = {lid: rng.dirichlet(np.full(N, 0.3), size=H) for lid in range(n_layers)}
        p, gamma, n = 0.25, float(rng.uniform(0.2, 0.8)), int(rng.integers(0, n_layers + 1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = select_layers(AttentionStats(scores, 1, N), p, gamma, n).selected_layers
        S = {lid: [head_score(a, p) for a in A] for lid, A in scores.items()}
        ok = filter_layers(S, gamma)
        want = tuple(sorted(sorted(ok, key=lambda lid: (-layer_score(S[lid]), lid))[:n]))
        bad += got != want
    return Check("KV layer selection", bad == 0, f"{bad} mismatches in {n_stats} cases")


def check_bandwidth() -> Check:
    text = resources.files("pdprune").joinpath("scenarios").joinpath("llama31-8b.json").read_text()
    sc = TransferScenario.from_json(text)
    vol = transfer_volume(sc, sc.stage_plan(), sc.kv_plan())
    none = transfer_volume(sc)
    ok = vol.bytes_full == 4 * 2 ** 30 and 4.9 <= vol.ratio <= 5.1 and none.ratio == 1.0
    return Check("transfer volume", ok, f"full {vol.bytes_full / 2 ** 30:.2f} GiB, ratio {vol.ratio:.4f}")


def check_end_to_end() -> Check:
    mismatched = []
    for name in SCENARIOS:
        sc = load_scenario(name)
        model, merged = scenario_model(sc)
        mg = merged_map(merged)
        two = run_two_node(model, sc.stage_plan(), sc.kv_plan(), sc.prompt(), sc.steps, mg)
        ref = reference_unified_run(model, sc.stage_plan(), sc.kv_plan(), sc.prompt(), sc.steps, mg)
        if two.transcript != ref or two.manifest != two.received:
            mismatched.append(name)
    return Check("two-node run equals unified reference", not mismatched,
                 f"mismatched: {mismatched}" if mismatched else f"{len(SCENARIOS)} scenarios")


def check_stage_assignment(n_runs: int = 200, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_runs):
        m = int(rng.integers(1, 5))
        best = tuple(RemovalElement.prune(2 * i) for i in range(m))
        gains = dict(zip(best, rng.normal(0.03, 0.03, size=m)))

        def f(plan: StagePlan) -> float:
            return sum(g for e, g in gains.items() if e not in plan.prefill_removals)

        plan = assign_stages(best, f, 0.03)
        expected = {e for e, g in gains.items() if g > 0.03}
        bad += not (set(plan.prefill_removals) <= set(plan.decode_removals)
                    and set(plan.decode_only()) == expected)
    return Check("stage assignment", bad == 0, f"{bad} violations in {n_runs} runs")


def check_toy_search() -> Check:
    model, _ = load_toy()
    cal = calibration()
    prof: RedundancyProfile = redundancy_profile(collect_trace(model, cal))
    part = partition(prof, K, D_T)
    obj = CalibrationObjective(model, cal)
    res = run_annealing(part, K, AnnealingSchedule(), obj, prof.r)
    _, f_star = brute_force_optimum(part, K, obj, prof.r)
    return Check("annealing reaches the brute-force optimum", res.best_f == f_star,
                 f"annealing {res.best_f:.5f}, brute force {f_star:.5f}")


CHECKS: dict[str, Callable[[], Check]] = {
    "schedule": check_schedule,
    "partition": check_partition,
    "gradients": check_gradients,
    "error-bound": check_error_bound,
    "kv-selection": check_kv_selection,
    "bandwidth": check_bandwidth,
    "end-to-end": check_end_to_end,
    "stages": check_stage_assignment,
    "toy-search": check_toy_search,
}


def run_all(names=None) -> list[Check]:
    names = list(CHECKS) if not names else names
    return [CHECKS[n]() for n in names]

