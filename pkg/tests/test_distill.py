import numpy as np
import pytest

from pdprune.distill import (DistillJob, apply_distillation, distill_pair, distill_pair_logits,
                             init_merged_block, make_job)
from pdprune.errors import ConsistencyError
from pdprune.model import block_apply
from pdprune.plan import RemovalElement, StagePlan


def test_init_copies_less_redundant_block(small_model):
    blk = init_merged_block(small_model, (1, 2), [0.1, 0.9, 0.4, 0.2])
    assert np.array_equal(blk.wq, small_model.block(2).wq)
    assert blk.wq is not small_model.block(2).wq
    tie = init_merged_block(small_model, (1, 2), [0.0, 0.5, 0.5, 0.0])
    assert np.array_equal(tie.w1, small_model.block(1).w1)
    with pytest.raises(ValueError):
        init_merged_block(small_model, (1, 3), [0.0] * 4)


def test_zero_epochs_returns_init(small_model, rng):
    job = make_job(small_model, rng.integers(0, 16, (4, 8)), (0, 1), [0.5, 0.6, 0.7, 0.8], epochs=0)
    rec = distill_pair(job)
    assert rec.block is job.init and rec.steps == 0
    assert rec.init_mse == rec.final_mse
    assert rec.source == 0


def test_identity_target_is_already_optimal(small_model, rng):
    # if the teacher's two blocks equal the source block alone, the copy is exact
    x = rng.standard_normal((3, 6, 16))
    blk = small_model.block(0)
    job = DistillJob((0, 1), x, block_apply(blk, x), blk, 0, epochs=5)
    rec = distill_pair(job)
    assert rec.init_mse == 0.0 and rec.final_mse == 0.0


def test_distillation_reduces_mse(small_model, rng):
    job = make_job(small_model, rng.integers(0, 16, (8, 12)), (1, 2), [0.0, 0.3, 0.5, 0.0], epochs=30)
    rec = distill_pair(job)
    assert rec.final_mse < rec.init_mse


def test_job_validation(small_model):
    blk = small_model.block(0)
    with pytest.raises(ValueError):
        DistillJob((0, 1), np.zeros((1, 2, 16)), np.zeros((1, 3, 16)), blk, 0)
    with pytest.raises(ValueError):
        DistillJob((0, 1), np.zeros((1, 2, 16)), np.zeros((1, 2, 16)), blk, 0, epochs=-1)
    with pytest.raises(ValueError):
        distill_pair(DistillJob((0, 1), np.zeros((0, 2, 16)), np.zeros((0, 2, 16)), blk, 0))


def test_logit_distillation_does_not_get_worse(small_model, rng):
    cal = rng.integers(0, 16, (4, 10))
    rec = distill_pair_logits(small_model, cal, (2, 3), [0, 0, 0.2, 0.3], lr=1e-3, epochs=5)
    assert rec.final_mse <= rec.init_mse


def test_apply_distillation_views(small_model):
    r = [0.0, 0.2, 0.1, 0.0]
    plan = StagePlan.unified([RemovalElement.distill(1, r)])
    merged = {(1, 2): small_model.block(0)}
    pre, dec = apply_distillation(small_model, plan, merged)
    assert pre.n_layers == dec.n_layers == 3
    assert dec.layer_ids == (0, 2, 3) and dec.block(2) is small_model.block(0)
    with pytest.raises(ConsistencyError):
        apply_distillation(small_model, plan, {})
