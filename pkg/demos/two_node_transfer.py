"""Run every shipped toy scenario across a real loopback socket.

For each scenario the prefill node ships a PDKV manifest to a decode thread;
the transcript is compared with the single-process reference, and the
manifest size is turned into a modeled link time.

    python demos/two_node_transfer.py
"""

from pdprune import reference_unified_run, run_two_node, toy, transfer_metrics
from pdprune.runtime import logit_drift

BANDWIDTH = 1e9    # bytes per second
LATENCY = 50e-6

for name in toy.SCENARIOS:
    sc = toy.load_scenario(name)
    model, records = toy.scenario_model(sc)
    merged = {r.pair: r.block for r in records}
    plan, kv_plan, prompt = sc.stage_plan(), sc.kv_plan(), sc.prompt()
    run = run_two_node(model, plan, kv_plan, prompt, sc.steps, merged)
    ref = reference_unified_run(model, plan, kv_plan, prompt, sc.steps, merged)
    m = transfer_metrics(run.manifest, BANDWIDTH, LATENCY)
    print(f"{name}:")
    print(f"  prefill removes {[str(e) for e in plan.prefill_removals]}, "
          f"decode removes {[str(e) for e in plan.decode_removals]}")
    print(f"  KV-pruned layers {list(kv_plan.selected_layers) if kv_plan else []}")
    print(f"  manifest {m.volume_bytes} B (K/V payload {m.payload_bytes} B), modeled link {m.seconds * 1e6:.1f} us")
    print(f"  transcript {run.transcript[:8]}...  matches reference: {run.transcript == ref}")
    drift = logit_drift(model, plan, kv_plan, prompt, ref[:8], merged)
    print(f"  logit drift vs unpruned model, first 8 steps: {[round(float(x), 3) for x in drift]}")
