"""Redundancy analysis and removal search on the shipped 10-block toy model.

Prints the per-block redundancy, the set partition, the annealing trace next
to the brute-force optimum, and which removals end up decode-only.

    python demos/toy_search.py
"""

import numpy as np

from pdprune import (AnnealingSchedule, assign_stages, brute_force_optimum, partition,
                     redundancy_profile, run_annealing)
from pdprune import toy
from pdprune.model import collect_trace
from pdprune.objective import CalibrationObjective

model, merged = toy.load_toy()
cal = toy.calibration()
prof = redundancy_profile(collect_trace(model, cal))
np.set_printoptions(precision=3, suppress=True)
print("r (cosine of block input and output):", prof.r)
print("d (pair metric):                      ", prof.d)

part = partition(prof, toy.K, toy.D_T)
print(f"\nk={toy.K}: P_initial={part.p_initial} pairs={part.distillation} P_final={part.p_final}")

obj = CalibrationObjective(model, cal)
print(f"unpruned calibration accuracy: {obj(()):.4f}")
res = run_annealing(part, toy.K, AnnealingSchedule(), obj, prof.r)
for entry in res.log[::6]:
    print(f"  iter {entry['iteration']:2d}  T={entry['T']:7.3f}  candidate f={entry['f']:.4f}"
          f"  accepted={entry['accepted']!s:5}  best={entry['best_f']:.4f}")
best, f_star = brute_force_optimum(part, toy.K, obj, prof.r)
print(f"annealing best  {res.best_f:.5f}  {[str(e) for e in res.best]}  ({res.iterations} iterations)")
print(f"brute force     {f_star:.5f}  {[str(e) for e in best]}")

# stage assignment scores every candidate plan with trained merged blocks in decode mode
stage_obj = CalibrationObjective(model, cal, mode="decode", merged={r.pair: r.block for r in merged})
trace = []
plan = assign_stages(res.best, stage_obj, 0.03, log=trace)
for row in trace:
    print(f"  {row['element']:13s} both={row['f_both']:.4f} decode-only={row['f_decode_only']:.4f}"
          f" -> {'decode only' if row['decode_only'] else 'both stages'}")
print("prefill removals:", [str(e) for e in plan.prefill_removals])
print("decode removals: ", [str(e) for e in plan.decode_removals])
