"""Idle store: LIFO behavior, conservation, culling, integral."""

import threading
import time
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threadcache.idle_store import IdleStore

from conftest import FakeWorker
from oracles import ReferenceStack


def make_store(**kw):
    return IdleStore(**kw)


class TestLifoBasics:
    def test_push_then_pop_is_lifo(self, fake_workers):
        a, b = fake_workers(2)
        s = make_store()
        s.push(a)
        s.push(b)
        assert s.pop() is b
        assert s.pop() is a

    def test_pop_empty(self):
        assert make_store().pop() is None

    def test_push_onto_empty_count(self, fake_workers):
        (w,) = fake_workers(1)
        s = make_store()
        assert s.count == 0
        s.push(w)
        assert s.count == 1

    def test_idle_since_stamped_by_push(self, fake_workers):
        (w,) = fake_workers(1)
        s = make_store()
        before = time.monotonic_ns()
        s.push(w)
        assert before <= w.idle_since <= time.monotonic_ns()

    def test_peak_tracks_high_water_mark(self, fake_workers):
        ws = fake_workers(3)
        s = make_store()
        for w in ws:
            s.push(w)
        for _ in range(3):
            s.pop()
        assert s.count == 0
        assert s.peak == 3


class TestCull:
    def test_cull_removes_tail(self, fake_workers):
        a, b, c = fake_workers(3)
        s = make_store()
        for w, t in ((a, 1), (b, 2), (c, 3)):
            s.push(w, now=t)
        assert s.cull_oldest(1) == [a]
        assert s.snapshot() == [c, b]

    def test_cull_clamps_to_size(self, fake_workers):
        ws = fake_workers(3)
        s = make_store()
        for i, w in enumerate(ws):
            s.push(w, now=i)
        got = s.cull_oldest(5)
        assert got == ws  # oldest first
        assert s.count == 0

    def test_cull_zero(self, fake_workers):
        s = make_store()
        s.push(fake_workers(1)[0])
        assert s.cull_oldest(0) == []
        assert s.count == 1

    def test_cull_negative_rejected(self):
        with pytest.raises(ValueError):
            make_store().cull_oldest(-1)

    def test_cull_older_than(self, fake_workers):
        ws = fake_workers(4)
        s = make_store()
        for i, w in enumerate(ws):
            s.push(w, now=i * 10)
        got = s.cull_older_than(15)
        assert got == ws[:2]
        assert s.count == 2

    def test_cull_during_concurrent_pushes_is_oldest_first(self, fake_workers):
        # every culled worker is no younger than every survivor
        s = make_store()
        ws = fake_workers(400)
        for w in ws[:200]:
            s.push(w)
        stop = threading.Event()

        def pusher(chunk):
            for w in chunk:
                s.push(w)
                if stop.is_set():
                    return

        threads = [threading.Thread(target=pusher, args=(ws[200 + 50 * i:250 + 50 * i],))
                   for i in range(4)]
        for t in threads:
            t.start()
        culled = s.cull_oldest(100)
        stop.set()
        for t in threads:
            t.join()
        assert len(culled) == 100
        survivors = s.snapshot()
        max_culled = max(w.idle_since for w in culled)
        assert all(w.idle_since >= max_culled for w in survivors)
        # conservation across the whole episode
        assert len(culled) + len(survivors) == 400


class TestIntegral:
    def test_empty_is_zero(self):
        assert make_store().integral(now=123) == 0

    def test_direct_summation(self, fake_workers):
        # idle 5 s, 3 s, 1 s -> 9 thread-seconds
        ws = fake_workers(3)
        s = make_store()
        now = 10_000_000_000
        for w, age_s in zip(ws, (5, 3, 1)):
            s.push(w, now=now - age_s * 1_000_000_000)
        assert s.integral(now=now) == pytest.approx(9.0)

    def test_single_worker(self, fake_workers):
        (w,) = fake_workers(1)
        s = make_store()
        s.push(w, now=0)
        assert s.integral(now=2_000_000_000) == pytest.approx(2.0)

    def test_exact_against_frozen_snapshot(self, fake_workers):
        s = make_store()
        for i, w in enumerate(fake_workers(20)):
            s.push(w, now=i * 7919)
        now = 1_000_000
        frozen = s.snapshot()
        recomputed = sum(now - w.idle_since for w in frozen) / 1e9
        assert s.integral(now=now) == recomputed


class TestRaces:
    def test_concurrent_pushes_then_pops_conserve(self, fake_workers):
        s = make_store()
        ws = fake_workers(64)
        barrier = threading.Barrier(8)

        def pusher(chunk):
            barrier.wait()
            for w in chunk:
                s.push(w)

        threads = [threading.Thread(target=pusher, args=(ws[i * 8:(i + 1) * 8],))
                   for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        popped = [s.pop() for _ in range(64)]
        assert Counter(id(w) for w in popped) == Counter(id(w) for w in ws)
        assert s.pop() is None

    def test_single_element_pop_race(self, fake_workers):
        # exactly one of two racing pops wins
        s = make_store()
        (w,) = fake_workers(1)
        for _ in range(2000):
            s.push(w)
            results = [None, None]
            barrier = threading.Barrier(2)

            def popper(i):
                barrier.wait()
                results[i] = s.pop()

            ts = [threading.Thread(target=popper, args=(i,)) for i in (0, 1)]
            for t in ts:
                t.start()
            for t in ts:
                t.join()
            assert sorted(x is not None for x in results) == [False, True]

    def test_push_pop_stress_conservation(self, fake_workers):
        # scaled-down here; the full 8x8/1e6 run lives in the acceptance suite
        run_stress(n_ops=40_000, pushers=4, poppers=4)

    def test_suspended_pusher_does_not_block_others(self, fake_workers):
        # lock-free push: park one pusher between head-read and CAS and
        # verify another pusher completes meanwhile
        s = make_store()
        a, b = fake_workers(2)
        gate = threading.Event()
        entered = threading.Event()

        def hook(op, node, succ):
            if op == "push" and node is a:
                entered.set()
                gate.wait(2.0)

        s._hook = hook
        t = threading.Thread(target=lambda: s.push(a))
        t.start()
        assert entered.wait(2.0)
        s._hook = None
        s.push(b)  # completes while the first pusher is suspended
        assert s.count == 1
        gate.set()
        t.join()
        assert s.count == 2
        got = {s.pop(), s.pop()}
        assert got == {a, b}

    def test_aba_injected_delay_between_read_and_cas(self, fake_workers):
        # delay the popper after its head read; a push intervenes; the
        # pop must retry, never unlink through a stale successor
        s = make_store()
        a, b = fake_workers(2)
        s.push(a)
        pushed = threading.Event()

        def hook(op, node, succ):
            if op == "pop" and not pushed.is_set():
                s._hook = None
                s.push(b)
                pushed.set()
                s._hook = hook

        s._hook = hook
        got1 = s.pop()
        s._hook = None
        got2 = s.pop()
        assert {got1, got2} == {a, b}
        assert got1 is b  # LIFO: the intervening push is on top
        assert s.pop() is None


def run_stress(n_ops, pushers, poppers, shards=1):
    """Element-conservation stress; returns (pushed, popped) multisets."""
    s = IdleStore(shards=shards)
    per = n_ops // (2 * pushers)
    pools = [[FakeWorker((p, i)) for i in range(per)] for p in range(pushers)]
    popped = [[] for _ in range(poppers)]
    start = threading.Barrier(pushers + poppers)
    done = threading.Event()

    def push_job(p):
        start.wait()
        for w in pools[p]:
            s.push(w)

    def pop_job(q):
        start.wait()
        out = popped[q]
        while not done.is_set() or s.count:
            w = s.pop()
            if w is not None:
                out.append(w)

    ts = [threading.Thread(target=push_job, args=(p,)) for p in range(pushers)]
    ts += [threading.Thread(target=pop_job, args=(q,)) for q in range(poppers)]
    for t in ts:
        t.start()
    for t in ts[:pushers]:
        t.join()
    done.set()
    for t in ts[pushers:]:
        t.join()
    leftovers = []
    while True:
        w = s.pop()
        if w is None:
            break
        leftovers.append(w)
    got = [w for lst in popped for w in lst] + leftovers
    want = [w for pool in pools for w in pool]
    assert Counter(id(w) for w in got) == Counter(id(w) for w in want)
    return want, got


class TestSharded:
    def test_sharded_conservation(self):
        run_stress(n_ops=20_000, pushers=4, poppers=4, shards=4)

    def test_sharded_pop_scans_all_shards(self, fake_workers):
        s = make_store(shards=4)
        ws = fake_workers(8)
        # force workers onto specific shards
        for i, w in enumerate(ws):
            s._shards[i % 4].push(w, now=i, hook=None)
        got = [s.pop() for _ in range(8)]
        assert Counter(id(w) for w in got) == Counter(id(w) for w in ws)

    def test_sharded_cull_is_globally_oldest_first(self, fake_workers):
        s = make_store(shards=3)
        ws = fake_workers(9)
        for i, w in enumerate(ws):
            s._shards[i % 3].push(w, now=i, hook=None)
        got = s.cull_oldest(4)
        assert [w.idle_since for w in got] == [0, 1, 2, 3]

    def test_invalid_shards(self):
        with pytest.raises(ValueError):
            IdleStore(shards=0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(["push", "pop", "cull1", "cull2"]),
                max_size=60))
def test_sequential_history_matches_reference_stack(ops):
    """Any single-threaded op sequence behaves like a plain list stack."""
    s = IdleStore()
    ref = ReferenceStack()
    serial = 0
    now = 0
    for op in ops:
        now += 1
        if op == "push":
            w = FakeWorker(serial)
            serial += 1
            s.push(w, now=now)
            ref.push(w)
        elif op == "pop":
            assert s.pop() is ref.pop()
        else:
            k = int(op[-1])
            assert s.cull_oldest(k) == ref.cull_oldest(k)
        assert s.count == len(ref.items)
