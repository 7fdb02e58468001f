"""Analytical latency and memory model for one MoE layer.

The model is calibrated rather than predictive: every rate is a parameter.
Defaults are rough V100 figures (fp16, NVLink-class links, PCIe at the 12 GB/s
observed host-to-device rate).

Latency of one batch::

    total = gate + reorder + max(0, a2a_size - reorder) + a2a_payload
            + expert_compute + max(0, cpu_gpu_transfer - a2a_payload)

The size exchange runs concurrently with the token reorder, and expert
copies from host memory run concurrently with the payload exchange.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._validation import check_positive
from .balance import Placement
from .buffer import CacheConfig, MissReport
from .exchange import CommReport, Topology
from .gating import MODES, DynamicDispatchPlan, GatingConfig, StaticDispatchPlan, dispatch_mask_elements


@dataclass(frozen=True)
class ComputeParams:
    expert_seconds_per_assignment: float = 5e-7
    reorder_seconds_per_element: float = 2.2e-12
    gate_seconds: float = 1e-4
    token_dim: int = 1024
    element_bytes: int = 2
    expert_bytes: float = 2 * 1024 * 4096 * 2
    non_expert_bytes: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            check_positive(value, name, allow_zero=True)

    @property
    def token_bytes(self) -> int:
        return int(self.token_dim * self.element_bytes)


@dataclass(frozen=True, eq=False)
class LatencyBreakdown:
    gate: float
    reorder: float
    a2a_size: float
    a2a_payload: float
    expert_compute: float
    cpu_gpu_transfer: float
    device_compute: np.ndarray

    @property
    def hidden_size_exchange(self) -> float:
        return min(self.a2a_size, self.reorder)

    @property
    def exposed_transfer(self) -> float:
        return max(0.0, self.cpu_gpu_transfer - self.a2a_payload)

    @property
    def total(self) -> float:
        return (
            self.gate
            + self.reorder
            + max(0.0, self.a2a_size - self.reorder)
            + self.a2a_payload
            + self.expert_compute
            + self.exposed_transfer
        )

    def components(self) -> dict[str, float]:
        return {
            "gate": self.gate,
            "reorder": self.reorder,
            "a2a_size": self.a2a_size,
            "a2a_payload": self.a2a_payload,
            "expert_compute": self.expert_compute,
            "cpu_gpu_transfer": self.cpu_gpu_transfer,
            "total": self.total,
        }


@dataclass(frozen=True)
class MemoryBreakdown:
    static_bytes: float
    mask_bytes: float
    token_buffer_bytes: float
    index_bytes: float

    @property
    def dynamic_bytes(self) -> float:
        return self.mask_bytes + self.token_buffer_bytes + self.index_bytes

    @property
    def peak_bytes(self) -> float:
        return self.static_bytes + self.dynamic_bytes

    def components(self) -> dict[str, float]:
        return {
            "static": self.static_bytes,
            "dispatch_mask": self.mask_bytes,
            "token_buffer": self.token_buffer_bytes,
            "index": self.index_bytes,
            "dynamic": self.dynamic_bytes,
            "peak": self.peak_bytes,
        }


def _check_mode(mode: str, plan) -> None:
    expected = {"static": StaticDispatchPlan, "dynamic": DynamicDispatchPlan}
    if mode not in expected:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not isinstance(plan, expected[mode]):
        raise ValueError(f"{mode} mode needs a {expected[mode].__name__}, got {type(plan).__name__}")


def model_latency(
    mode: str,
    plan: StaticDispatchPlan | DynamicDispatchPlan,
    comm: CommReport,
    params: ComputeParams,
    placement: Placement,
    cache: MissReport | None = None,
    batch: int = 0,
    round_trip: bool = True,
) -> LatencyBreakdown:
    """Latency breakdown of one batch.

    Static mode charges expert compute for every slot, placeholders included;
    dynamic mode charges the real assignments.  Each device computes its own
    experts, so ``expert_compute`` is the slowest device.  With
    ``round_trip`` the payload exchange is charged twice (dispatch, then the
    transposed combine exchange, which has the same bottleneck link).
    ``cache`` supplies the host-to-device copy time of batch ``batch``.
    """
    _check_mode(mode, plan)
    if ("size" in comm.phase_times) != (mode == "dynamic"):
        raise ValueError(f"comm report phases {list(comm.phase_times)} do not match {mode} mode")
    if placement.num_experts != plan.num_experts:
        raise ValueError(f"placement covers {placement.num_experts} experts, plan {plan.num_experts}")
    td, t_el = params.token_dim, params.reorder_seconds_per_element
    if mode == "static":
        per_expert = np.full(plan.num_experts, plan.capacity)
        reorder = plan.num_experts * plan.seq_len * plan.capacity * td * t_el
    else:
        per_expert = np.asarray(plan.counts)
        reorder = plan.seq_len * plan.top_k * td * t_el
    device_compute = (
        np.bincount(placement.device_of, weights=per_expert, minlength=placement.num_devices)
        * params.expert_seconds_per_assignment
    )
    device_compute.setflags(write=False)
    payload = comm.phase_times["payload"] * (2 if round_trip else 1)
    transfer = float(cache.batch_transfer_seconds[batch]) if cache is not None else 0.0
    return LatencyBreakdown(
        gate=params.gate_seconds,
        reorder=float(reorder),
        a2a_size=float(comm.phase_times.get("size", 0.0)),
        a2a_payload=float(payload),
        expert_compute=float(device_compute.max()),
        cpu_gpu_transfer=transfer,
        device_compute=device_compute,
    )


def model_memory(
    mode: str,
    cfg: GatingConfig,
    seq_len: int,
    topo: Topology,
    params: ComputeParams,
    cache: CacheConfig | None = None,
) -> MemoryBreakdown:
    """Static (parameters) and dynamic (dispatch buffers) bytes per device.

    With buffering only ``cache_size`` experts stay resident, never more than
    the device owns.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    per_device = topo.experts_per_device
    resident = min(cache.cache_size, per_device) if cache is not None else per_device
    static = params.non_expert_bytes + resident * params.expert_bytes
    E, k, S = cfg.num_experts, cfg.top_k, seq_len
    el = params.element_bytes
    if mode == "static":
        mask = dispatch_mask_elements(S, E, cfg.capacity_factor) * el
        tokens = E * cfg.capacity(S) * params.token_dim * el
        index = 0
    else:
        mask = 0
        tokens = k * S * params.token_dim * el
        index = (k * S + E) * topo.size_msg_bytes
    return MemoryBreakdown(float(static), float(mask), float(tokens), float(index))


def throughput(lb: LatencyBreakdown, tokens: int) -> float:
    """Tokens per second."""
    if lb.total <= 0:
        raise ValueError("throughput undefined for zero latency")
    return tokens / lb.total


def write_components_csv(rows, path: str | Path, unit: str) -> None:
    """``rows`` of ``(mode, components_dict)`` as ``mode,component,<unit>``."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mode", "component", unit])
        for mode, comps in rows:
            for name, value in comps.items():
                w.writerow([mode, name, repr(float(value))])
