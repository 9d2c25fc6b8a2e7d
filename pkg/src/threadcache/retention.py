"""Retention policies for the idle-worker cache.

Four policies decide which idle workers are kept:

* ``UNBOUNDED``  — cache every logically terminated worker.
* ``CLAMP``      — cap the idle depth at ``clamp_size``; by default the
  incoming (warmest) worker is admitted and the coldest is evicted, an
  alternative refused-admission mode is available via ``keep_incoming``.
* ``AGE_OUT``    — admit everything; a periodic reap culls workers idle
  longer than ``max_idle_age`` seconds.
* ``INTEGRAL_BUDGET`` — admit everything; reap culls oldest-first until the
  thread-seconds integral of the idle list drops to ``budget``.

Independently of the policy, workers idle longer than ``release_after``
seconds can have their scratch-stack pages handed back to the OS with
madvise(MADV_DONTNEED); the pages come back demand-zero-filled, so the
worker still runs correctly when next dispatched.
"""

from __future__ import annotations

import enum
import logging
import mmap
import os
from dataclasses import dataclass, field
from typing import List, Mapping, Optional

log = logging.getLogger(__name__)

_NS = 1_000_000_000


class Policy(enum.Enum):
    UNBOUNDED = "unbounded"
    CLAMP = "clamp"
    AGE_OUT = "age"
    INTEGRAL_BUDGET = "integral"


class Verdict(enum.Enum):
    CACHE = "cache"
    TERMINATE = "terminate"


@dataclass
class RetentionConfig:
    policy: Policy = Policy.UNBOUNDED
    clamp_size: int = 8              # CLAMP only
    max_idle_age: float = 30.0       # seconds, AGE_OUT only
    budget: float = 60.0             # thread-seconds, INTEGRAL_BUDGET only
    reap_period: float = 1.0         # seconds, maintenance cadence
    release_after: Optional[float] = None  # seconds; None disables release
    keep_incoming: bool = True       # CLAMP: evict oldest vs refuse incoming

    def __post_init__(self):
        if self.clamp_size < 0:
            raise ValueError("clamp_size must be >= 0")
        if self.max_idle_age <= 0:
            raise ValueError("max_idle_age must be > 0")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.reap_period <= 0:
            raise ValueError("reap_period must be > 0")

    @property
    def needs_reaper(self) -> bool:
        return (self.policy in (Policy.AGE_OUT, Policy.INTEGRAL_BUDGET)
                or self.release_after is not None)

    @classmethod
    def from_env(cls, environ: Optional[Mapping[str, str]] = None) -> "RetentionConfig":
        """Build a config from the THREADCACHE_* environment variables."""
        env = os.environ if environ is None else environ
        kw = {}
        name = env.get("THREADCACHE_POLICY")
        if name:
            try:
                kw["policy"] = Policy(name.strip().lower())
            except ValueError:
                raise ValueError(f"unknown THREADCACHE_POLICY {name!r}") from None
        if "THREADCACHE_CLAMP" in env:
            kw["clamp_size"] = int(env["THREADCACHE_CLAMP"])
        if "THREADCACHE_AGE_MS" in env:
            kw["max_idle_age"] = int(env["THREADCACHE_AGE_MS"]) / 1000.0
        if "THREADCACHE_BUDGET_MS" in env:
            # thread-milliseconds -> thread-seconds
            kw["budget"] = int(env["THREADCACHE_BUDGET_MS"]) / 1000.0
        if "THREADCACHE_REAP_MS" in env:
            kw["reap_period"] = int(env["THREADCACHE_REAP_MS"]) / 1000.0
        if "THREADCACHE_RELEASE_MS" in env:
            kw["release_after"] = int(env["THREADCACHE_RELEASE_MS"]) / 1000.0
        return cls(**kw)


@dataclass
class AdmitDecision:
    verdict: Verdict
    evictions: List = field(default_factory=list)

    def __post_init__(self):
        if self.evictions and self.verdict is not Verdict.CACHE:
            raise ValueError("evictions only accompany a CACHE verdict")


_CACHE = AdmitDecision(Verdict.CACHE)
_TERMINATE = AdmitDecision(Verdict.TERMINATE)


def admit(worker, store, now: int, cfg: RetentionConfig) -> AdmitDecision:
    """Per-exit decision for a worker that just finished a task.

    AGE_OUT and INTEGRAL_BUDGET always admit here; their culling happens in
    reap. CLAMP evicts the oldest cached worker(s) to make room for the
    incoming one (it carries the most residual cache/scheduling affinity),
    unless keep_incoming is off, in which case a full cache refuses it.
    """
    pol = cfg.policy
    if pol is Policy.CLAMP:
        clamp = cfg.clamp_size
        if clamp == 0:
            return _TERMINATE
        overflow = store.count + 1 - clamp
        if overflow <= 0:
            return _CACHE
        if not cfg.keep_incoming:
            return _TERMINATE
        return AdmitDecision(Verdict.CACHE, store.cull_oldest(overflow))
    return _CACHE


def reap(store, now: int, cfg: RetentionConfig) -> List:
    """Periodic cull pass; returns the workers removed (oldest first).

    `now` is frozen for the whole pass: age and integral checks all use the
    same instant, so a pass terminates and its post-state is well defined.
    """
    pol = cfg.policy
    if pol is Policy.AGE_OUT:
        return store.cull_older_than(now - int(cfg.max_idle_age * _NS))
    if pol is Policy.INTEGRAL_BUDGET:
        culled = []
        # each cull removes the largest single contribution, so the loop
        # strictly decreases the integral and terminates
        while store.integral(now) > cfg.budget:
            got = store.cull_oldest(1)
            if not got:
                break
            culled.extend(got)
        return culled
    return []


def release_stack_memory(worker) -> bool:
    """Advise the OS that the worker's idle scratch-stack pages may be
    reclaimed (demand-zero-filled on next touch).

    Returns False when unsupported or when the worker has no scratch
    arena; advisory failures are logged and ignored, never fatal.
    """
    arena = getattr(worker, "stack_extent", None)
    if arena is None or not hasattr(mmap, "MADV_DONTNEED"):
        return False
    try:
        arena.madvise(mmap.MADV_DONTNEED)
    except (OSError, ValueError) as exc:
        log.warning("stack release advisory failed for %s: %s",
                    getattr(worker, "worker_id", "?"), exc)
        return False
    worker.released = True
    return True
