import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from sherlab import envs
from sherlab.replay import PrioritizedBuffer, SumTree, Transition, filter_virtual, relabel_episode


def make_t(i=0.0, reward=-1.0, virtual=False, moved=False, dim=3):
    return Transition(
        state=np.full(dim, i), action=np.zeros(2), reward=reward, next_state=np.full(dim, i + 1),
        achieved_goal=np.zeros(2), next_achieved_goal=np.zeros(2), desired_goal=np.ones(2),
        done=reward == 0.0, virtual=virtual, object_moved=moved,
    )


def filled(n, **kw):
    buf = PrioritizedBuffer(capacity=kw.pop("capacity", max(n, 1)), **kw)
    buf.store_many([make_t(i) for i in range(n)])
    return buf


def test_store_into_empty():
    buf = PrioritizedBuffer(capacity=10)
    buf.store(make_t())
    assert len(buf) == 1
    assert buf.tree.total == pytest.approx(buf.max_priority ** buf.alpha)


def test_ring_eviction():
    buf = PrioritizedBuffer(capacity=2)
    for i in range(3):
        buf.store(make_t(float(i)))
    assert len(buf) == 2
    assert sorted(buf.column("state")[:, 0].tolist()) == [1.0, 2.0]


def test_store_rejects_bad_transitions():
    buf = PrioritizedBuffer(capacity=4)
    with pytest.raises(ValueError):
        buf.store(make_t(reward=0.5))
    bad = make_t()
    bad.state[0] = np.nan
    with pytest.raises(ValueError):
        buf.store(bad)


def test_sample_undersized():
    with pytest.raises(ValueError):
        filled(3).sample(4, np.random.default_rng(0))


def test_uniform_priorities_sample_uniformly():
    n = 50
    buf = filled(n)
    rng = np.random.default_rng(0)
    counts = np.zeros(n)
    for _ in range(2000):
        _, _, idx = buf.sample(50, rng)
        np.add.at(counts, idx % n, 1)
    _, pval = stats.chisquare(counts)
    assert pval > 0.01


def test_dominant_priority():
    buf = filled(20)
    serials = np.arange(20)
    td = np.full(20, 1e-9)
    td[7] = 1e9
    buf.eps_priority = 0.0
    buf.update_priorities(serials, td)
    _, _, idx = buf.sample(20, np.random.default_rng(1))
    counts = np.zeros(20)
    rng = np.random.default_rng(2)
    for _ in range(500):
        _, _, idx = buf.sample(20, rng)
        np.add.at(counts, idx, 1)
    assert counts[7] / counts.sum() > 0.99


def test_alpha_zero_is_uniform():
    buf = filled(10, alpha=0.0)
    buf.update_priorities(np.arange(10), np.arange(10) * 100.0)
    np.testing.assert_allclose(buf.tree.leaves(), 1.0)


def test_importance_weights_normalized():
    buf = filled(30)
    buf.update_priorities(np.arange(30), np.random.default_rng(0).uniform(0, 5, 30))
    _, w, _ = buf.sample(16, np.random.default_rng(3))
    assert w.max() == 1.0 and np.all(w > 0)


def test_update_floor_and_locality():
    buf = filled(8)
    before = buf.tree.leaves().copy()
    buf.update_priorities([3], [0.0])
    assert buf.priorities()[3] == buf.eps_priority
    after = buf.tree.leaves()
    changed = np.flatnonzero(after != before)
    assert changed.tolist() == [3]


def test_stale_indices_skipped():
    buf = PrioritizedBuffer(capacity=4)
    buf.store_many([make_t(i) for i in range(4)])
    _, _, idx = buf.sample(4, np.random.default_rng(0))
    buf.store_many([make_t(i) for i in range(4)])   # overwrite every slot
    before = buf.tree.leaves().copy()
    buf.update_priorities(idx, np.full(4, 7.0))
    assert buf.stale_skipped == 4
    np.testing.assert_array_equal(buf.tree.leaves(), before)


def test_clear_empties_buffer():
    buf = filled(10)
    buf.clear()
    assert len(buf) == 0 and buf.tree.total == 0.0
    buf.store(make_t(dim=5))  # a new width is accepted after a clear
    assert buf.column("state").shape == (1, 5)


def test_root_matches_scan_after_random_updates():
    rng = np.random.default_rng(0)
    buf = PrioritizedBuffer(capacity=1000)
    buf.store_many([make_t(i) for i in range(1000)])
    for _ in range(10_000):
        k = int(rng.integers(1, 5))
        buf.update_priorities(rng.integers(0, 1000, k), rng.exponential(1.0, k))
    leaves = buf.priorities() ** buf.alpha
    assert abs(buf.tree.total - leaves.sum()) <= 1e-6 * leaves.sum()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 70), st.lists(st.tuples(st.integers(0, 200), st.floats(0, 1e3)), max_size=60))
def test_sum_tree_property(cap, ops):
    tree = SumTree(cap)
    ref = np.zeros(cap)
    for i, v in ops:
        tree.set(i % cap, v)
        ref[i % cap] = v
    assert tree.total == pytest.approx(ref.sum(), rel=1e-9, abs=1e-9)
    np.testing.assert_array_equal(tree.leaves(), ref)


def test_sum_tree_find_prefix():
    tree = SumTree(4)
    tree.set(np.arange(4), [1.0, 2.0, 3.0, 4.0])
    assert tree.find(np.array([0.5, 1.5, 3.5, 9.9])).tolist() == [0, 1, 2, 3]


def episode(n=6, moving=True):
    out = []
    initial = np.zeros(2)
    for i in range(n):
        ag0 = np.array([0.1 * i, 0.0]) if moving else initial.copy()
        ag1 = np.array([0.1 * (i + 1), 0.0]) if moving else initial.copy()
        out.append(Transition(
            state=np.full(3, i), action=np.zeros(2), reward=-1.0, next_state=np.full(3, i + 1),
            achieved_goal=ag0, next_achieved_goal=ag1, desired_goal=np.array([5.0, 5.0]), done=False,
            object_moved=bool(np.linalg.norm(ag1 - initial) > 1e-4), initial_achieved_goal=initial,
        ))
    return out


def test_relabel_future_goals_from_later_steps():
    ep = episode()
    virt = relabel_episode(ep, "future", 4, 0.05, np.random.default_rng(0))
    assert virt and all(v.virtual for v in virt)
    assert all(not t.virtual for t in ep)  # originals untouched
    pos = 0
    for i, t in enumerate(ep):
        k = min(4, len(ep) - i)
        for v in virt[pos:pos + k]:
            later = [e.next_achieved_goal for e in ep[i:]]
            assert any(np.array_equal(v.desired_goal, g) for g in later)
            assert v.reward == envs.sparse_reward(v.next_achieved_goal, v.desired_goal, 0.05)
            assert v.done == (v.reward == 0.0)
            np.testing.assert_array_equal(v.state, t.state)
        pos += k
    assert pos == len(virt)


def test_relabel_own_goal_is_success():
    ep = episode(1)
    v = relabel_episode(ep, "future", 4, 0.05, np.random.default_rng(0))
    assert len(v) == 1 and v[0].reward == 0.0


def test_relabel_strategies_and_zero():
    ep = episode()
    assert relabel_episode(ep, "future", 0, 0.05) == []
    final = relabel_episode(ep, "final", 4, 0.05, np.random.default_rng(0))
    assert len(final) == len(ep)
    assert all(np.array_equal(v.desired_goal, ep[-1].next_achieved_goal) for v in final)
    whole = relabel_episode(ep, "episode", 3, 0.05, np.random.default_rng(0))
    assert len(whole) == 3 * len(ep)
    with pytest.raises(ValueError):
        relabel_episode(ep, "ibs", 4, 0.05)


def test_filter_decisions():
    assert not filter_virtual(make_t(reward=0.0, virtual=True, moved=False))
    assert filter_virtual(make_t(reward=0.0, virtual=True, moved=True))
    assert filter_virtual(make_t(reward=-1.0, virtual=True, moved=False))
    with pytest.raises(ValueError):
        filter_virtual(make_t())


def test_filter_on_static_episode():
    ep = episode(moving=False)
    virt = relabel_episode(ep, "future", 4, 0.05, np.random.default_rng(0))
    assert all(v.reward == 0.0 for v in virt)
    assert not any(filter_virtual(v) for v in virt)
    buf = PrioritizedBuffer(capacity=100)
    buf.store_many(virt)
    assert buf.count_bad_virtual() == len(virt)


def test_priority_histogram_counts_everything():
    buf = filled(25)
    buf.update_priorities(np.arange(25), np.linspace(0, 50, 25))
    assert sum(buf.priority_histogram()) == 25


def test_refill_after_clear_samples_live_entries():
    buf = PrioritizedBuffer(capacity=8)
    buf.store_many([make_t(i) for i in range(5)])
    _, _, old = buf.sample(2, np.random.default_rng(0))
    buf.clear()
    buf.store_many([make_t(100 + i) for i in range(3)])
    assert sorted(buf.column("state")[:, 0].tolist()) == [100.0, 101.0, 102.0]
    assert buf.priorities().shape == (3,)
    batch, _, idx = buf.sample(3, np.random.default_rng(1))
    assert set(batch["state"][:, 0].tolist()) <= {100.0, 101.0, 102.0}
    buf.update_priorities(old, [5.0, 5.0])  # pre-clear indices are stale
    assert buf.stale_skipped == 2
    buf.update_priorities(idx, [1.0, 2.0, 3.0])
    assert buf.stale_skipped == 2
