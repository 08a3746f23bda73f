import io
import json
import math

import pytest
from hypothesis import given, strategies as st

from auxlatent.rewards import RewardConfig
from auxlatent.rollout import (BiasSchedulerState, GroupBatch, SamplerConfig, batch_mean_latent_reward,
                               collect_groups, dump_rollouts, sample_response, update_bias)


def test_initial_bias_is_b0():
    assert BiasSchedulerState().bias == 10.0


def test_first_update_value():
    s = BiasSchedulerState(rho=0.9)
    assert update_bias(s, 0.5) == pytest.approx(10 * math.exp(-0.05), abs=1e-12)
    assert update_bias(BiasSchedulerState(), 0.5) == pytest.approx(9.5123, abs=1e-4)


@given(st.lists(st.floats(-0.2, 0.5), min_size=1, max_size=60))
def test_bias_non_increasing_for_non_decreasing_rewards(rs):
    s = BiasSchedulerState()
    prev = s.bias
    for r in sorted(rs):
        b = update_bias(s, r)
        assert b <= prev + 1e-12
        assert s.b_min <= b <= s.b0
        prev = b


def test_bias_floor_cap_and_disable():
    s = BiasSchedulerState(b_min=1.0, decay=50.0)
    for _ in range(50):
        update_bias(s, 0.5)
    assert s.bias == 1.0
    neg = BiasSchedulerState()
    update_bias(neg, -0.2)
    assert neg.bias == 10.0
    off = BiasSchedulerState(enabled=False)
    assert update_bias(off, 0.5) == 0.0 and off.ema == pytest.approx(0.05)


def test_sampler_validation():
    with pytest.raises(ValueError):
        SamplerConfig(temperature=0)
    with pytest.raises(ValueError):
        SamplerConfig(top_p=1.5)


def _collect(model, tasks, seed=0, n=4):
    return collect_groups(tasks, model, SamplerConfig(max_response_len=12, n_samples=n), 1.0,
                          RewardConfig(l_max=12), base_seed=seed)


def test_groups_are_reproducible_and_seeded_per_sample(tiny_model, small_tasks):
    a = _collect(tiny_model, small_tasks[:2])
    b = _collect(tiny_model, small_tasks[:2])
    assert [r.tokens for g in a for r in g.rollouts] == [r.tokens for g in b for r in g.rollouts]
    seeds = [r.seed for g in a for r in g.rollouts]
    assert len(set(seeds)) == len(seeds)
    c = _collect(tiny_model, small_tasks[:2], seed=1)
    assert [r.seed for g in c for r in g.rollouts] != seeds


def test_group_contents(tiny_model, small_tasks):
    (g,) = _collect(tiny_model, small_tasks[:1])
    assert g.prompt_id == small_tasks[0].id and len(g.rollouts) == 4
    assert [r.sample_idx for r in g.rollouts] == [0, 1, 2, 3]
    assert g.component_matrix().shape == (4, 5)
    for r in g.rollouts:
        assert len(r.logp_actor) == len(r.tokens) and all(lp <= 0 for lp in r.logp_actor)
    assert batch_mean_latent_reward([g]) == pytest.approx(sum(rb.lat for rb in g.rewards) / 4)


def test_group_needs_two_samples(tiny_model, small_tasks):
    with pytest.raises(ValueError):
        _collect(tiny_model, small_tasks[:1], n=1)


def test_group_rejects_mixed_prompts(tiny_model, small_tasks):
    g1, g2 = _collect(tiny_model, small_tasks[:2])
    with pytest.raises(ValueError):
        GroupBatch("x", small_tasks[0], [g1.rollouts[0], g2.rollouts[0]])


def test_sample_response_is_deterministic(tiny_model, small_tasks):
    s = SamplerConfig(max_response_len=10)
    a = sample_response(small_tasks[0], tiny_model, s, 0.0, seed=9)
    b = sample_response(small_tasks[0], tiny_model, s, 0.0, seed=9)
    assert a.tokens == b.tokens


def test_dump_rollouts_jsonl(tiny_model, small_tasks):
    groups = _collect(tiny_model, small_tasks[:2])
    buf = io.StringIO()
    dump_rollouts(groups, buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert len(lines) == 8
    assert set(lines[0]) == {"prompt_id", "sample_idx", "tokens", "text", "logp_actor", "logp_ref",
                             "reward_breakdown"}
    assert set(lines[0]["reward_breakdown"]) == {"acc", "fmt", "lat", "len", "rep", "total"}
