"""KV transfer volume of the LLaMA-3.1-8B geometry under different retention settings.

The shipped scenario is calibrated to land near a 4.95x reduction; the sweep
shows how the ratio moves with the retention ratio p and the number of
selected layers.

    python demos/bandwidth_sweep.py
"""

from importlib import resources

from pdprune import KVSelectionPlan, TransferScenario, transfer_volume

text = resources.files("pdprune").joinpath("scenarios").joinpath("llama31-8b.json").read_text()
sc = TransferScenario.from_json(text)
vol = transfer_volume(sc, sc.stage_plan(), sc.kv_plan())
print(f"shipped scenario: full {vol.bytes_full / 2**30:.2f} GiB, pruned {vol.bytes_pruned / 2**30:.3f} GiB, "
      f"ratio {vol.ratio:.3f}x")

layers = sc.kv_plan().selected_layers
print("\n   p    n=8     n=16    n=22")
for p in (0.0333, 0.05, 0.1, 0.2, 0.3):
    row = []
    for n in (8, 16, 22):
        v = transfer_volume(sc, sc.stage_plan(), KVSelectionPlan(p, 0.75, n, layers[:n]))
        row.append(f"{v.ratio:6.2f}x")
    print(f"{p:6.4f}  " + "  ".join(row))
