import numpy as np
import pytest

from pdprune import toy
from pdprune.errors import ConsistencyError
from pdprune.kvprune import KVSelectionPlan, TransferScenario, transfer_volume
from pdprune.model import forward_prefill, greedy_generate
from pdprune.plan import RemovalElement, StagePlan, stage_views
from pdprune.runtime import (load_manifest_for, logit_drift, reference_unified_run, run_decode_node,
                             run_prefill_node, run_two_node, transfer_metrics, transfer_time)
from pdprune.wire import decode_manifest


@pytest.mark.parametrize("name", toy.SCENARIOS)
def test_two_node_matches_reference(name):
    sc = toy.load_scenario(name)
    model, merged = toy.scenario_model(sc)
    merged = {rec.pair: rec.block for rec in merged}
    ref = reference_unified_run(model, sc.stage_plan(), sc.kv_plan(), sc.prompt(), sc.steps, merged)
    run = run_two_node(model, sc.stage_plan(), sc.kv_plan(), sc.prompt(), sc.steps, merged)
    assert run.transcript == ref
    assert len(ref) == sc.steps
    assert run.received == run.manifest


def test_no_pruning_matches_plain_generation(small_model):
    prompt = np.arange(10) % 16
    want = greedy_generate(small_model, prompt, 6)
    assert reference_unified_run(small_model, (), None, prompt, 6) == want
    assert run_two_node(small_model, (), None, prompt, 6, transport="inproc").transcript == want


def test_two_node_is_deterministic(small_model):
    plan = StagePlan((), (RemovalElement.prune(2),))
    kvp = KVSelectionPlan(0.25, 0.0, 1, (1,))
    a = run_two_node(small_model, plan, kvp, np.arange(12), 8)
    b = run_two_node(small_model, plan, kvp, np.arange(12), 8)
    assert a.transcript == b.transcript and a.manifest == b.manifest


def test_inconsistent_stage_plan_is_rejected(small_model):
    bad = StagePlan((RemovalElement.prune(0),), (RemovalElement.prune(1),))
    with pytest.raises(ConsistencyError):
        reference_unified_run(small_model, bad, None, np.arange(8), 3)
    with pytest.raises(ConsistencyError):
        run_two_node(small_model, bad, None, np.arange(8), 3)


def test_decode_node_checks_the_manifest(small_model):
    pre_view, dec_view = stage_views(small_model, StagePlan((), (RemovalElement.prune(3),)))
    pre = run_prefill_node(pre_view, dec_view, np.arange(8))
    with pytest.raises(ConsistencyError):
        run_decode_node(small_model, pre.manifest, pre.first_token, 3)
    other = run_prefill_node(pre_view, pre_view, np.arange(8))
    with pytest.raises(ConsistencyError):
        load_manifest_for(dec_view, other.manifest)
    assert len(run_decode_node(dec_view, pre.manifest, pre.first_token, 3)) == 3


def test_decode_cache_grows_by_one_per_step(small_model):
    from pdprune.model import decode_step
    pre_view, dec_view = stage_views(small_model, ())
    kvp = KVSelectionPlan(0.25, 0.0, 1, (2,))
    pre = run_prefill_node(pre_view, dec_view, np.arange(16), kvp)
    kv = load_manifest_for(dec_view, pre.manifest)
    counts = [kv.token_counts()]
    for tok in (1, 2, 3):
        _, kv = decode_step(dec_view, tok, kv)
        counts.append(kv.token_counts())
    assert [c[2] for c in counts] == [8, 9, 10, 11]
    assert [c[0] for c in counts] == [16, 17, 18, 19]


def test_transfer_time_examples():
    assert transfer_time(0, 1e9, 0.002) == 0.002
    assert transfer_time(5000, 1000.0) == 5.0
    with pytest.raises(ValueError):
        transfer_time(1, 0.0)
    with pytest.raises(ValueError):
        transfer_time(1, 1.0, -1.0)


def test_manifest_ratio_matches_transfer_volume():
    sc = toy.load_scenario("toy-kv")
    model, merged = toy.scenario_model(sc)
    prompt = sc.prompt()
    pre_view, dec_view = stage_views(model, sc.stage_plan())
    full = run_prefill_node(pre_view, dec_view, prompt)
    pruned = run_prefill_node(pre_view, dec_view, prompt, sc.kv_plan())
    m_full = transfer_metrics(full.manifest, 1e9)
    m_pruned = transfer_metrics(pruned.manifest, 1e9)
    cfg = model.config
    geom = TransferScenario(cfg.n_blocks, cfg.n_heads, cfg.d_model // cfg.n_heads, 8, len(prompt))
    vol = transfer_volume(geom, sc.stage_plan(), sc.kv_plan())
    assert m_full.payload_bytes == vol.bytes_full
    assert m_pruned.payload_bytes == vol.bytes_pruned
    assert m_full.volume_bytes == len(full.manifest)
    assert m_full.seconds == pytest.approx(len(full.manifest) / 1e9)
    assert decode_manifest(pruned.manifest).payload_bytes < decode_manifest(full.manifest).payload_bytes


def test_logit_drift_is_zero_without_pruning(small_model):
    drift = logit_drift(small_model, (), None, np.arange(10), [1, 2, 3])
    assert drift.shape == (3,) and np.all(drift == 0)
    pruned = logit_drift(small_model, (), KVSelectionPlan(0.1, 0.0, 1, (0,)), np.arange(10), [1, 2, 3])
    assert np.all(pruned > 0)


def test_first_token_comes_from_prefill(small_model):
    prompt = np.arange(9)
    first = int(np.argmax(forward_prefill(small_model, prompt).logits[-1]))
    assert reference_unified_run(small_model, (), None, prompt, 1) == [first]
