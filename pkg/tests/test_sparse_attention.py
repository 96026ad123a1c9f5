import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chunkreuse.model import causal_mask, masked_attention
from chunkreuse.sparse_attention import (ExclusivePage, KernelStats, QIndexPlan, build_equivalent_mask,
                                         q_sparse_attn)

H, D = 2, 8


def random_instance(rng, n_shared, ratio, n_new):
    k_crit = int(np.floor(ratio * n_shared + 0.5))
    crit = np.sort(rng.choice(n_shared, size=k_crit, replace=False))
    slots = rng.permutation(k_crit)
    plan = QIndexPlan(n_shared, crit, n_new, {int(c): int(s) for c, s in zip(crit, slots)})
    shared_pos = np.arange(1, n_shared + 1)
    q_pos = np.concatenate([shared_pos[crit], np.arange(n_shared + 1, n_shared + 1 + n_new)])
    nq = k_crit + n_new
    f = lambda *s: rng.standard_normal(s).astype(np.float32)
    return plan, shared_pos, q_pos, f(nq, H, D), f(nq, H, D), f(nq, H, D), f(n_shared, H, D), f(n_shared, H, D)


def dense_oracle(plan, shared_pos, q_pos, q, k, v, sk, sv):
    nq = len(q_pos)
    slot_k = np.zeros((nq, H, D), np.float32)
    slot_v = np.zeros_like(slot_k)
    order = [plan.exclusive_page[int(c)] for c in plan.critical] + list(range(plan.n_critical, nq))
    slot_k[order], slot_v[order] = k, v
    mask = build_equivalent_mask(plan, shared_pos, q_pos)
    return masked_attention(q, np.concatenate([sk, slot_k]), np.concatenate([sv, slot_v]), mask)


def run_kernel(plan, shared_pos, q_pos, q, k, v, sk, sv, stats=None):
    page = ExclusivePage.allocate(plan, H, D)
    return q_sparse_attn(q, k, v, sk, sv, shared_pos, q_pos, plan, page, tile=16, stats=stats), page


@given(seed=st.integers(0, 10**6), n_shared=st.integers(1, 120), ratio=st.sampled_from([0.05, 0.15, 0.5, 1.0]),
       n_new=st.integers(1, 8))
def test_kernel_matches_mask_oracle(seed, n_shared, ratio, n_new):
    inst = random_instance(np.random.default_rng(seed), n_shared, ratio, n_new)
    before = inst[-2].tobytes(), inst[-1].tobytes()
    out, page = run_kernel(*inst)
    np.testing.assert_allclose(out, dense_oracle(*inst), atol=1e-5)
    assert (inst[-2].tobytes(), inst[-1].tobytes()) == before


def test_page_holds_fresh_kv(rng):
    plan, sp, qp, q, k, v, sk, sv = random_instance(rng, 30, 0.15, 3)
    _, page = run_kernel(plan, sp, qp, q, k, v, sk, sv)
    for i, c in enumerate(plan.critical):
        np.testing.assert_array_equal(page.k[plan.exclusive_page[int(c)]], k[i])
        assert page.positions[plan.exclusive_page[int(c)]] == sp[c]


def test_zero_critical_is_dense_causal(rng):
    plan, sp, qp, q, k, v, sk, sv = random_instance(rng, 40, 0.0, 5)
    out, _ = run_kernel(plan, sp, qp, q, k, v, sk, sv)
    ref = masked_attention(q, np.concatenate([sk, k]), np.concatenate([sv, v]),
                           causal_mask(qp, np.concatenate([sp, qp])))
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_plan_rows_and_page_slots():
    # chunk tokens 6..10 cached at rows 5..9 (1-based 6..10); critical 6 and 8; three user tokens
    plan = QIndexPlan(10, np.array([5, 7]), 3)
    assert list(plan.q_indices + 1) == [6, 8, 13, 14, 15]
    assert sorted(np.array(list(plan.exclusive_page.values())) + plan.n_shared + 1) == [11, 12]
    mask = build_equivalent_mask(plan, np.arange(1, 11), np.array([6, 8, 11, 12, 13]))
    assert not mask[:, [5, 7]].any()


def test_two_critical_mask_row():
    # 8-token prompt, rows 1..6 reused, tokens 3 and 5 recomputed, question is 7 and 8
    plan = QIndexPlan(6, np.array([2, 4]), 2)
    q_pos = np.array([3, 5, 7, 8])
    mask = build_equivalent_mask(plan, np.arange(1, 7), q_pos)
    key_pos = np.concatenate([np.arange(1, 7), q_pos])
    assert sorted(key_pos[mask[0]]) == [1, 2, 3]
    assert sorted(key_pos[mask[1]]) == [1, 2, 3, 4, 5]
    assert sorted(key_pos[mask[3]]) == [1, 2, 3, 4, 5, 6, 7, 8]


def test_empty_plan_mask():
    assert build_equivalent_mask(QIndexPlan(4, np.array([], int), 0), np.arange(1, 5), []).shape == (0, 4)


@pytest.mark.parametrize("kwargs", [
    dict(n_shared=4, critical=np.array([5]), n_new=1),
    dict(n_shared=4, critical=np.array([2, 1]), n_new=1),
    dict(n_shared=4, critical=np.array([1, 2]), n_new=1, exclusive_page={1: 0, 2: 0}),
    dict(n_shared=4, critical=np.array([1]), n_new=1, exclusive_page={3: 0}),
])
def test_invalid_plans(kwargs):
    with pytest.raises(ValueError):
        QIndexPlan(**kwargs)


def test_critical_position_mismatch(rng):
    plan, sp, qp, q, k, v, sk, sv = random_instance(rng, 20, 0.15, 2)
    qp = qp.copy()
    qp[0] += 100
    with pytest.raises(ValueError):
        run_kernel(plan, sp, qp, q, k, v, sk, sv)


def test_batch_isolation(rng):
    # two requests reuse one shared chunk with different plans; each result equals its solo run
    f = lambda *s: rng.standard_normal(s).astype(np.float32)
    sk, sv, sp = f(50, H, D), f(50, H, D), np.arange(1, 51)
    results = []
    for crit in (np.array([3, 10, 40]), np.array([10, 11])):
        plan = QIndexPlan(50, crit, 2)
        qp = np.concatenate([sp[crit], [51, 52]])
        args = (plan, sp, qp, f(len(qp), H, D), f(len(qp), H, D), f(len(qp), H, D), sk, sv)
        results.append((args, run_kernel(*args)[0]))
    for args, out in results:
        np.testing.assert_array_equal(run_kernel(*args)[0], out)


def test_flops_linear_in_query_count(rng):
    f = lambda *s: rng.standard_normal(s).astype(np.float32)
    sk, sv, sp = f(200, H, D), f(200, H, D), np.arange(1, 201)
    flops = []
    for n_new in (8, 16, 32):
        plan = QIndexPlan(200, np.array([], int), n_new)
        qp = np.arange(201, 201 + n_new)
        stats = KernelStats()
        run_kernel(plan, sp, qp, f(n_new, H, D), f(n_new, H, D), f(n_new, H, D), sk, sv, stats)
        flops.append(stats.flops)
    per_query = np.array(flops) / np.array([8, 16, 32])
    assert flops[0] < flops[1] < flops[2]
    assert per_query.max() / per_query.min() < 1.2
