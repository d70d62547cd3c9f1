from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rafiki_core import inference as inf
from rafiki_core.errors import EmptySelection, EmptyStats

B = inf.DEFAULT_BATCHES


def queue_of(times, capacity=10_000):
    q = inf.RequestQueue(capacity)
    q.enqueue(times)
    return q


def test_enqueue_examples():
    q = inf.RequestQueue(10)
    assert inf.enqueue(q, [0.0, 0.1, 0.2]) == (3, 0)
    q = inf.RequestQueue(5)
    assert q.enqueue(np.arange(8) * 0.1) == (5, 3)
    np.testing.assert_array_equal(q.oldest(), np.arange(5) * 0.1)
    assert q.enqueue([9.0]) == (0, 1)
    assert (q.accepted, q.dropped) == (5, 4)


def test_queue_pop_is_fifo_and_compacts():
    q = inf.RequestQueue(100_000, reserve=16)
    times = np.arange(5000) * 0.001
    for chunk in np.array_split(times, 50):
        q.enqueue(chunk)
        q.pop(len(q) // 2)
    rest = q.oldest()
    assert np.all(np.diff(rest) > 0)
    np.testing.assert_array_equal(rest, times[-len(rest):])
    assert q.ids()[0] == 5000 - len(rest)


def test_greedy_full_batch():
    q = queue_of(np.zeros(70))
    assert inf.greedy_step(q, inf.inception_v3().c, 0.0, 0.56, 0.056, B) == inf.Batch(64)


def test_greedy_guard_waits_then_fires():
    c = inf.inception_v3().c
    q = queue_of(np.full(20, 0.0))
    step = inf.greedy_step(q, c, 0.1, 0.56, 0.056, B)
    assert isinstance(step, inf.Wait)
    # 0.07 + 0.1 + 0.056 = 0.226 < 0.56; wake when the guard would hold
    assert step.wake_at == pytest.approx(0.0 + 0.56 - 0.056 - 0.07)
    assert inf.greedy_step(q, c, 0.45, 0.56, 0.056, B) == inf.Batch(16)


def test_greedy_residual_below_smallest_batch_waits():
    q = queue_of([0.0] * 5)
    step = inf.greedy_step(q, inf.inception_v3().c, 100.0, 0.56, 0.056, B)
    assert isinstance(step, inf.Wait) and step.wake_at is None and step.wake_len == 16


def test_greedy_with_delta_tenth_of_tau():
    tau = 1.0
    c = {16: 0.2, 32: 0.3, 48: 0.4, 64: 0.5}.get
    q = queue_of(np.zeros(40))
    # b=32: 0.3 + w + 0.1 >= 1.0 needs w >= 0.6
    assert isinstance(inf.greedy_step(q, c, 0.59, tau, 0.1 * tau, B), inf.Wait)
    assert inf.greedy_step(q, c, 0.6, tau, 0.1 * tau, B) == inf.Batch(32)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 200), st.floats(0, 2), st.floats(0, 0.3))
def test_greedy_never_leaves_full_batch_waiting(n, wait, delta):
    q = queue_of(np.zeros(n))
    step = inf.greedy_step(q, inf.inception_v3().c, wait, 0.56, delta, B)
    if n >= 64:
        assert step == inf.Batch(64)
    if isinstance(step, inf.Batch):
        assert step.size in B and step.size <= n


def test_greedy_rejects_negative_delta():
    with pytest.raises(ValueError):
        inf.greedy_step([0.0], inf.inception_v3().c, 0.0, 0.56, -1.0, B)


def test_profiles_and_exact_throughput_ratios():
    v3 = inf.inception_v3()
    assert v3.max_throughput() == pytest.approx(64 / 0.23, abs=1e-9)
    assert v3.min_throughput() == pytest.approx(16 / 0.07, abs=1e-9)
    trio = inf.serving_trio(572, 128)
    assert inf.async_throughput(trio) == pytest.approx(572, abs=1e-9)
    assert inf.sync_throughput(trio) == pytest.approx(128, abs=1e-9)
    with pytest.raises(ValueError):
        inf.ModelProfile("bad", "f", 0.5, {16: 0.2, 32: 0.1})


def test_ensemble_cost():
    p1 = inf.ModelProfile("a", "a", 0.7, {16: 0.07})
    p2 = inf.ModelProfile("b", "b", 0.8, {16: 0.23})
    assert inf.ensemble_cost([p1, p2], 1, 16) == 0.07
    assert inf.ensemble_cost([p1, p2], 3, 16) == 0.23
    trio = inf.serving_trio()
    for b in B:
        assert inf.ensemble_cost(trio, 7, b) == max(p.c(b) for p in trio)
    with pytest.raises(EmptySelection):
        inf.ensemble_cost(trio, 0, 16)


def vote_oracle(column, order):
    counts = Counter(column.tolist())
    top = max(counts.values())
    for i in order:
        if counts[column[i]] == top:
            return column[i]


def test_vote_matches_oracle():
    rng = np.random.default_rng(0)
    preds = rng.integers(0, 4, (3, 500))
    order = [2, 0, 1]
    got = inf.vote(preds, order)
    want = [vote_oracle(preds[:, j], order) for j in range(preds.shape[1])]
    np.testing.assert_array_equal(got, want)


def test_table_entries_match_vote_recomputation():
    trio = inf.serving_trio()
    preds = inf.simulate_predictions(trio, 5000, np.random.default_rng(1))
    table = inf.table_from_predictions(preds)
    emp = (preds == 0).mean(1)
    for v in range(1, 8):
        rows = inf.mask_members(v, 3)
        order = sorted(range(len(rows)), key=lambda j: -emp[rows[j]])
        sub = preds[rows]
        acc = np.mean([vote_oracle(sub[:, j], order) == 0 for j in range(sub.shape[1])])
        assert table[v] == pytest.approx(acc, abs=1e-12)
        assert inf.ensemble_accuracy(table, v) == table[v]
    for i in range(3):
        assert table[1 << i] == emp[i]
    # a pair either agrees or ties, so it scores exactly its better member
    for v in (3, 5, 6):
        assert table[v] == max(emp[i] for i in inf.mask_members(v, 3))
    with pytest.raises(EmptySelection):
        table[0]


def test_single_model_table_concentrates():
    p = inf.ModelProfile("m", "m", 0.8, {16: 0.1})
    t = inf.build_ensemble_table([p], np.random.default_rng(0), n_examples=100_000)
    assert abs(t[1] - 0.8) < 0.004


def test_always_correct_models_score_one():
    ps = [inf.ModelProfile(f"m{i}", f"m{i}", 1.0, {16: 0.1}) for i in range(3)]
    t = inf.build_ensemble_table(ps, np.random.default_rng(0), n_examples=1000)
    assert all(t[v] == 1.0 for v in range(1, 8))


def test_trio_table_is_reproducible():
    a = inf.build_ensemble_table(inf.serving_trio(), np.random.default_rng(5))
    b = inf.build_ensemble_table(inf.serving_trio(), np.random.default_rng(5))
    assert a.accuracy == b.accuracy
    assert a[7] > max(a[1], a[2], a[4])


def test_table_from_records():
    t = inf.table_from_records({"a": 0.7, "b": 0.8, "a+b": 0.8}, ["a", "b"])
    assert t[3] == 0.8 and t[1] == 0.7


def test_exceed_time():
    assert inf.exceed_time([0.1, 0.2], 0.5) == 0.0
    assert inf.exceed_time([0.6, 0.4], 0.5) == pytest.approx(0.05)
    lat = np.random.default_rng(0).random(100)
    assert inf.exceed_time(lat, 0.5) == pytest.approx(sum(max(0, x - 0.5) for x in lat) / 100)
    with pytest.raises(EmptyStats):
        inf.exceed_time([], 0.5)


def test_select_models():
    v3 = inf.inception_v3()
    assert inf.select_models([v3], 3) == [v3]
    twin = inf.ModelProfile("v3b", v3.family, 0.79, v3.latency)
    assert inf.select_models([v3, twin], 2) == [twin]
    trio = inf.serving_trio()
    assert {p.name for p in inf.select_models(trio, 3)} == {p.name for p in trio}
    far = inf.ModelProfile("old", "old", 0.5, v3.latency)
    assert far not in inf.select_models(trio + [far], 4)


def view(queue, busy, profiles, clock=0.0, tau=1.0):
    return inf.ServingView(clock, queue, np.array(busy, dtype=float), profiles, tau, B)


def test_sync_waits_for_all_models_and_uses_straggler():
    p1 = inf.ModelProfile("a", "a", 0.7, dict(zip(B, (0.05, 0.06, 0.065, 0.07))))
    p2 = inf.ModelProfile("b", "b", 0.8, dict(zip(B, (0.2, 0.21, 0.22, 0.23))))
    q = queue_of(np.zeros(64))
    d = inf.SyncDispatcher()
    assert d.decide(view(q, [0.0, 1.0], [p1, p2])) == ([], None)
    out, _ = d.decide(view(q, [0.0, 0.0], [p1, p2]))
    assert out == [inf.Dispatch(3, 64, 64)]
    assert inf.ensemble_cost([p1, p2], out[0].mask, 64) == 0.23


def test_async_round_robin_uses_both_free_models():
    trio = inf.serving_trio()[:2]
    q = queue_of(np.zeros(128))
    d = inf.async_dispatcher()
    out, _ = d.decide(view(q, [0.0, 0.0], trio))
    assert [x.mask for x in out] == [1, 2] and all(x.n == 64 for x in out)
    out, _ = d.decide(view(queue_of(np.zeros(64)), [0.0, 0.0], trio))
    assert [x.mask for x in out] == [1]
    # the pointer moved on: next batch goes to the second model
    out, _ = d.decide(view(queue_of(np.zeros(64)), [0.0, 0.0], trio))
    assert [x.mask for x in out] == [2]


def test_padded_batch():
    assert inf.padded_batch(1, B) == 16
    assert inf.padded_batch(33, B) == 48
    with pytest.raises(ValueError):
        inf.padded_batch(65, B)
