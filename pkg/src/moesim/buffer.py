"""Expert Buffering: per-device caches of expert parameters.

Each device keeps at most ``cache_size`` of its experts in fast memory.  In
every batch the active experts are visited serially in increasing id order.
On a miss with a full cache, LIFO and FIFO pick the victim in two steps:

1. the most recently inserted resident that is inactive in this batch;
2. otherwise the most recently (LIFO) or earliest (FIFO) inserted resident.

MIN is Belady's offline policy over the serialized access stream: it evicts
the resident whose next access is farthest away (never-again first, lowest id
among those) and needs the future access sequence.  It skips the
inactive-first step, which would stop it from being a lower bound.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._validation import check_positive, check_positive_int
from .balance import Placement
from .trace import LoadMatrix

POLICIES = ("LIFO", "FIFO", "MIN")
PCIE_OBSERVED_BANDWIDTH = 12e9


@dataclass(frozen=True)
class CacheConfig:
    cache_size: int
    policy: str = "LIFO"
    expert_bytes: float = 1.0
    cpu_gpu_bandwidth: float = PCIE_OBSERVED_BANDWIDTH

    def __post_init__(self):
        check_positive_int(self.cache_size, "cache_size")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        check_positive(self.expert_bytes, "expert_bytes")
        check_positive(self.cpu_gpu_bandwidth, "cpu_gpu_bandwidth")


@dataclass(frozen=True)
class CacheState:
    """Residents in insertion order (oldest first) plus running counters."""

    order: tuple[int, ...] = ()
    hits: int = 0
    misses: int = 0
    evictions: int = 0

    @property
    def resident(self) -> frozenset[int]:
        return frozenset(self.order)

    @property
    def stack(self) -> tuple[int, ...]:
        """Most recently inserted first."""
        return self.order[::-1]

    @property
    def queue(self) -> tuple[int, ...]:
        return self.order


@dataclass(frozen=True)
class BatchStats:
    hits: int
    misses: int
    evicted: tuple[int, ...]
    inserted: tuple[int, ...]


def _farthest(residents: Sequence[int], pending: set[int], future: Iterable[Iterable[int]]) -> int:
    """Resident whose next access lies farthest in the serialized access stream."""
    remaining = set(residents)
    next_use: dict[int, tuple[int, int]] = {r: (0, r) for r in remaining & pending}
    remaining -= pending
    for offset, batch in enumerate(future, start=1):
        if not remaining:
            break
        hit = remaining.intersection(batch)
        for r in hit:
            next_use[r] = (offset, r)
        remaining -= hit
    if remaining:
        return min(remaining)
    return max(next_use, key=next_use.__getitem__)


def access_batch(
    state: CacheState,
    active: Iterable[int],
    cfg: CacheConfig,
    future: Sequence[Iterable[int]] | None = None,
) -> tuple[CacheState, BatchStats]:
    """Run one batch of accesses and return the new state and its stats."""
    if cfg.policy == "MIN" and future is None:
        raise ValueError("MIN policy needs the future access sequence")
    seq = sorted(set(int(x) for x in active))
    active_set = set(seq)
    order = list(state.order)
    hits = misses = 0
    evicted, inserted = [], []
    for pos, x in enumerate(seq):
        if x in order:
            hits += 1
            continue
        misses += 1
        if len(order) >= cfg.cache_size:
            if cfg.policy == "MIN":
                victim = _farthest(order, set(seq[pos + 1:]), future)
            else:
                inactive = [r for r in order if r not in active_set]
                if inactive:
                    victim = inactive[-1]
                elif cfg.policy == "LIFO":
                    victim = order[-1]
                else:
                    victim = order[0]
            order.remove(victim)
            evicted.append(victim)
        order.append(x)
        inserted.append(x)
    new = CacheState(tuple(order), state.hits + hits, state.misses + misses, state.evictions + len(evicted))
    return new, BatchStats(hits, misses, tuple(evicted), tuple(inserted))


def transfer_time(misses: int, cfg: CacheConfig) -> float:
    """Seconds to copy ``misses`` experts from host to device memory."""
    if misses < 0:
        raise ValueError(f"misses must be nonnegative, got {misses}")
    return misses * cfg.expert_bytes / cfg.cpu_gpu_bandwidth


@dataclass(frozen=True, eq=False)
class MissReport:
    batch_accesses: np.ndarray
    batch_misses: np.ndarray
    cold_misses: int
    batch_transfer_seconds: np.ndarray

    @property
    def accesses(self) -> int:
        return int(self.batch_accesses.sum())

    @property
    def misses(self) -> int:
        return int(self.batch_misses.sum())

    @property
    def hits(self) -> int:
        return self.accesses - self.misses

    @property
    def miss_rate(self) -> float:
        return self.misses / self.accesses if self.accesses else 0.0

    @property
    def steady_state_miss_rate(self) -> float:
        """Miss rate with first-touch (compulsory) misses taken out."""
        return (self.misses - self.cold_misses) / self.accesses if self.accesses else 0.0

    @property
    def batch_miss_rates(self) -> np.ndarray:
        acc = self.batch_accesses
        return np.divide(self.batch_misses, acc, out=np.zeros(acc.shape), where=acc > 0)

    @property
    def worst_batch_miss_rate(self) -> float:
        r = self.batch_miss_rates
        return float(r.max()) if r.size else 0.0

    @property
    def transfer_seconds(self) -> float:
        return float(self.batch_transfer_seconds.sum())


@dataclass(frozen=True, eq=False)
class CacheSimResult:
    devices: tuple[MissReport, ...]
    total: MissReport
    final_states: tuple[CacheState, ...] = field(default=())


def device_active_sets(loads: LoadMatrix, placement: Placement) -> list[list[frozenset[int]]]:
    """``sets[n][b]``: experts on device ``n`` with positive load in batch ``b``."""
    if loads.num_experts != placement.num_experts:
        raise ValueError(f"loads cover {loads.num_experts} experts, placement {placement.num_experts}")
    on = [set(placement.experts_on(n).tolist()) for n in range(placement.num_devices)]
    per_batch = loads.active_sets()
    return [[s & on[n] for s in per_batch] for n in range(placement.num_devices)]


def simulate_device(active_seq: Sequence[Iterable[int]], cfg: CacheConfig) -> tuple[MissReport, CacheState]:
    """Fold :func:`access_batch` over one device's batches from a cold cache."""
    active_seq = [frozenset(s) for s in active_seq]
    state = CacheState()
    acc, miss = [], []
    seen: set[int] = set()
    for b, active in enumerate(active_seq):
        future = active_seq[b + 1:] if cfg.policy == "MIN" else None
        state, st = access_batch(state, active, cfg, future)
        acc.append(len(active))
        miss.append(st.misses)
        seen |= active
    miss = np.array(miss, dtype=np.int64)
    report = MissReport(
        batch_accesses=np.array(acc, dtype=np.int64),
        batch_misses=miss,
        cold_misses=len(seen),
        batch_transfer_seconds=miss * cfg.expert_bytes / cfg.cpu_gpu_bandwidth,
    )
    return report, state


def run_cache_sim(loads: LoadMatrix, placement: Placement, cfg: CacheConfig) -> CacheSimResult:
    """Simulate every device; the total aggregates accesses over devices.

    Devices copy over their own links, so a batch's total transfer time is
    the slowest device's.
    """
    reports, states = zip(*(simulate_device(seq, cfg) for seq in device_active_sets(loads, placement)))
    total = MissReport(
        batch_accesses=np.sum([r.batch_accesses for r in reports], axis=0),
        batch_misses=np.sum([r.batch_misses for r in reports], axis=0),
        cold_misses=sum(r.cold_misses for r in reports),
        batch_transfer_seconds=np.max([r.batch_transfer_seconds for r in reports], axis=0),
    )
    return CacheSimResult(tuple(reports), total, tuple(states))


@dataclass(frozen=True)
class SweepRow:
    size: int
    policy: str
    device: str
    miss_rate: float
    worst_batch_miss_rate: float
    transfer_seconds: float


SWEEP_HEADER = ("size", "policy", "device", "miss_rate", "worst_batch_miss_rate", "transfer_seconds")


def cache_sweep(
    loads: LoadMatrix,
    placement: Placement,
    sizes: Sequence[int],
    policies: Sequence[str] = POLICIES,
    expert_bytes: float = 1.0,
    cpu_gpu_bandwidth: float = PCIE_OBSERVED_BANDWIDTH,
) -> list[SweepRow]:
    """One row per (size, policy, device) plus a ``device="all"`` aggregate row."""
    rows = []
    for size in sizes:
        for policy in policies:
            cfg = CacheConfig(size, policy, expert_bytes, cpu_gpu_bandwidth)
            res = run_cache_sim(loads, placement, cfg)
            for n, r in enumerate(res.devices):
                rows.append(SweepRow(size, policy, str(n), r.miss_rate, r.worst_batch_miss_rate, r.transfer_seconds))
            t = res.total
            rows.append(SweepRow(size, policy, "all", t.miss_rate, t.worst_batch_miss_rate, t.transfer_seconds))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r.size, r.policy, r.device, repr(r.miss_rate), repr(r.worst_batch_miss_rate), repr(r.transfer_seconds)])
