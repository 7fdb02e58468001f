"""All-to-all token exchange between expert-parallel devices.

Static gating ships every expert row at full capacity, placeholders
included.  Dynamic gating first exchanges per-expert sizes, then ships only
the real assignments.  Volumes are exact byte counts per (source, target)
pair; time uses the bottleneck link of each phase.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_divisible, check_positive, check_positive_int
from .balance import Placement
from .gating import DynamicDispatchPlan, StaticDispatchPlan

RESIDENCY = ("round_robin", "single")


@dataclass(frozen=True)
class Topology:
    """Devices, message sizes and where a batch's tokens live before gating.

    With ``residency="round_robin"`` token ``t`` starts on device ``t % D``;
    ``"single"`` puts the whole batch on device 0.
    """

    num_devices: int
    num_experts: int
    token_bytes: int
    size_msg_bytes: int = 8
    residency: str = "round_robin"

    def __post_init__(self):
        check_divisible(self.num_experts, self.num_devices)
        check_positive_int(self.token_bytes, "token_bytes")
        check_positive_int(self.size_msg_bytes, "size_msg_bytes")
        if self.residency not in RESIDENCY:
            raise ValueError(f"residency must be one of {RESIDENCY}, got {self.residency!r}")

    @property
    def experts_per_device(self) -> int:
        return self.num_experts // self.num_devices

    def token_sources(self, seq_len: int) -> np.ndarray:
        if self.residency == "single":
            return np.zeros(seq_len, dtype=np.int64)
        return np.arange(seq_len) % self.num_devices


@dataclass(frozen=True, eq=False)
class CommPlan:
    """Named phases, each a ``(D, D)`` matrix of bytes from device i to j."""

    mode: str
    phases: tuple[tuple[str, np.ndarray], ...]

    def phase(self, name: str) -> np.ndarray:
        for n, m in self.phases:
            if n == name:
                return m
        raise KeyError(name)

    @property
    def phase_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.phases)

    def total_bytes(self, name: str) -> int:
        return int(self.phase(name).sum())

    def reverse(self) -> "CommPlan":
        """Combine-direction exchange: the payload phase transposed."""
        m = self.phase("payload").T.copy()
        m.setflags(write=False)
        return CommPlan(self.mode, (("payload", m),))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["phase", "src", "dst", "bytes"])
            write_comm_rows(w, self)


def write_comm_rows(writer, cp: CommPlan, prefix: tuple = ()) -> None:
    for name, m in cp.phases:
        D = m.shape[0]
        for i in range(D):
            for j in range(D):
                writer.writerow([*prefix, name, i, j, int(m[i, j])])


@dataclass(frozen=True)
class CommReport:
    phase_bytes: dict[str, int]
    max_link_bytes: dict[str, int]
    phase_times: dict[str, float]
    overlap_time: float = 0.0

    @property
    def total_time(self) -> float:
        """Serialized phases, with the size phase hidden behind ``overlap_time``."""
        t = self.phase_times
        if "size" in t:
            return max(t["size"], self.overlap_time) + t["payload"]
        return sum(t.values())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["phase", "total_bytes", "max_link_bytes", "seconds"])
            for name, b in self.phase_bytes.items():
                w.writerow([name, b, self.max_link_bytes[name], repr(self.phase_times[name])])


def _frozen(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.int64)
    m.setflags(write=False)
    return m


def _check(plan, topo: Topology, placement: Placement) -> None:
    if placement.num_experts != topo.num_experts or placement.num_devices != topo.num_devices:
        raise ValueError(
            f"placement ({placement.num_experts} experts on {placement.num_devices} devices) does not match "
            f"topology ({topo.num_experts} experts on {topo.num_devices} devices)"
        )
    if plan.num_experts != topo.num_experts:
        raise ValueError(f"plan routes {plan.num_experts} experts, topology has {topo.num_experts}")


def apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Split ``total`` integer units proportionally to integer ``weights``.

    Largest-remainder rounding; ties go to the lower index.
    """
    weights = np.asarray(weights, dtype=np.int64)
    denom = int(weights.sum())
    base = total * weights // denom
    rem = total * weights % denom
    short = total - int(base.sum())
    if short:
        winners = np.lexsort((np.arange(weights.size), -rem))[:short]
        base[winners] += 1
    return base


def plan_static_exchange(plan: StaticDispatchPlan, topo: Topology, placement: Placement) -> CommPlan:
    """Every expert row travels at full capacity, split over source devices by token share."""
    _check(plan, topo, placement)
    D = topo.num_devices
    per_source = apportion(plan.capacity, np.bincount(topo.token_sources(plan.seq_len), minlength=D))
    experts_on = np.bincount(placement.device_of, minlength=D)
    payload = np.outer(per_source, experts_on) * topo.token_bytes
    return CommPlan("static", (("payload", _frozen(payload)),))


def plan_dynamic_exchange(plan: DynamicDispatchPlan, topo: Topology, placement: Placement) -> CommPlan:
    """Size exchange followed by the variable-size payload exchange."""
    _check(plan, topo, placement)
    D, k = topo.num_devices, plan.top_k
    experts_on = np.bincount(placement.device_of, minlength=D)
    size = np.tile(experts_on * topo.size_msg_bytes, (D, 1))
    src = np.repeat(topo.token_sources(plan.seq_len), k)
    dst = placement.device_of[plan.experts.ravel()]
    payload = np.bincount(src * D + dst, minlength=D * D).reshape(D, D) * topo.token_bytes
    return CommPlan("dynamic", (("size", _frozen(size)), ("payload", _frozen(payload))))


def simulate_exchange(
    cp: CommPlan, link_bandwidth: float, link_latency: float = 0.0, overlap_time: float = 0.0
) -> CommReport:
    """Per phase: ``latency + max link bytes / bandwidth``.

    Every (i, j) entry counts as a link, local copies included.
    ``overlap_time`` is work that runs concurrently with the size phase.
    """
    bw = check_positive(link_bandwidth, "link_bandwidth")
    lat = check_positive(link_latency, "link_latency", allow_zero=True)
    totals, peaks, times = {}, {}, {}
    for name, m in cp.phases:
        peak = int(m.max()) if m.size else 0
        totals[name] = int(m.sum())
        peaks[name] = peak
        times[name] = lat + peak / bw
    return CommReport(totals, peaks, times, float(overlap_time))
