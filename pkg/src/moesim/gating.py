"""Static-capacity and dynamic gating dispatch, plus the matching combine.

Static gating gives each expert ``ceil(C * S)`` slots: assignments fill the
slots first-come-first-served in token order, overflow is dropped and unused
slots stay as placeholders.  Dynamic gating sorts the ``k * S`` assignment
slots by expert id (stable argsort) and counts occurrences, so every
assignment is dispatched exactly once.

Assignment slots are numbered token-major: slot ``t * k + j`` is the ``j``-th
expert choice of token ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from ._validation import as_fraction, check_positive_int
from .trace import Batch

PLACEHOLDER = -1
MODES = ("static", "dynamic")


def _frozen(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def expert_capacity(seq_len: int, capacity_factor) -> int:
    """Slots per expert, ``ceil(C * S)`` computed on exact rationals."""
    return math.ceil(as_fraction(capacity_factor) * seq_len)


@dataclass(frozen=True)
class GatingConfig:
    num_experts: int
    top_k: int = 1
    capacity_factor: Any = 1
    mode: str = "static"

    def __post_init__(self):
        check_positive_int(self.num_experts, "num_experts")
        check_positive_int(self.top_k, "top_k")
        if self.top_k > self.num_experts:
            raise ValueError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        c = as_fraction(self.capacity_factor)
        if c < 0 or (self.mode == "static" and c == 0):
            raise ValueError(f"capacity_factor must be {'> 0' if self.mode == 'static' else '>= 0'}, got {c}")

    @property
    def capacity_fraction(self) -> Fraction:
        return as_fraction(self.capacity_factor)

    def capacity(self, seq_len: int) -> int:
        return expert_capacity(seq_len, self.capacity_factor)

    def with_mode(self, mode: str) -> "GatingConfig":
        return GatingConfig(self.num_experts, self.top_k, self.capacity_factor, mode)


@dataclass(frozen=True, eq=False)
class StaticDispatchPlan:
    """Fixed-size expert rows.

    ``slots[e]`` holds ``capacity`` assignment-slot ids (or ``PLACEHOLDER``),
    ``dropped`` the ``(token, expert)`` pairs that found their row full.
    """

    capacity: int
    slots: np.ndarray
    dropped: tuple[tuple[int, int], ...]
    seq_len: int
    num_experts: int
    top_k: int
    experts: np.ndarray
    weights: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        """Assignments requested per expert, before dropping."""
        return np.bincount(self.experts.ravel(), minlength=self.num_experts)

    @property
    def placed(self) -> np.ndarray:
        """Non-placeholder entries per expert row."""
        return (self.slots != PLACEHOLDER).sum(axis=1)

    def token_rows(self) -> np.ndarray:
        """``slots`` with slot ids mapped to token indices (placeholders kept)."""
        return np.where(self.slots == PLACEHOLDER, PLACEHOLDER, self.slots // self.top_k)

    def pairs(self) -> list[tuple[int, int]]:
        """``(token, expert)`` pairs that are processed, row by row."""
        rows = self.token_rows()
        return [(int(t), e) for e in range(self.num_experts) for t in rows[e] if t != PLACEHOLDER]

    def to_dict(self) -> dict:
        rows = self.token_rows()
        return {
            "capacity": self.capacity,
            "slots": [[None if t == PLACEHOLDER else int(t) for t in row] for row in rows],
            "dropped": [list(p) for p in self.dropped],
            "S": self.seq_len,
        }


@dataclass(frozen=True, eq=False)
class DynamicDispatchPlan:
    """Expert-sorted permutation of the ``k * S`` assignment slots."""

    order: np.ndarray
    counts: np.ndarray
    splits: np.ndarray
    seq_len: int
    num_experts: int
    top_k: int
    experts: np.ndarray
    weights: np.ndarray

    def segment(self, expert: int) -> np.ndarray:
        return self.order[self.splits[expert]:self.splits[expert + 1]]

    def pairs(self) -> list[tuple[int, int]]:
        k = self.top_k
        return [(int(s) // k, e) for e in range(self.num_experts) for s in self.segment(e)]

    def to_dict(self) -> dict:
        return {
            "order": self.order.tolist(),
            "counts": self.counts.tolist(),
            "splits": self.splits.tolist(),
            "S": self.seq_len,
            "E": self.num_experts,
            "k": self.top_k,
        }


DispatchPlan = StaticDispatchPlan | DynamicDispatchPlan


def _check_batch(batch: Batch, cfg: GatingConfig, mode: str) -> np.ndarray:
    if cfg.mode != mode:
        raise ValueError(f"{mode} dispatch needs a {mode}-mode GatingConfig, got {cfg.mode!r}")
    if batch.top_k != cfg.top_k:
        raise ValueError(f"batch has top_k={batch.top_k}, config expects {cfg.top_k}")
    batch.validate(cfg.num_experts, cfg.top_k)
    return batch.experts.ravel()


def static_dispatch(batch: Batch, cfg: GatingConfig, *, capacity: int | None = None) -> StaticDispatchPlan:
    """Fill fixed-capacity expert rows in token order, dropping overflow.

    ``capacity`` overrides the ``ceil(C * S)`` rule.
    """
    flat = _check_batch(batch, cfg, "static")
    E, S = cfg.num_experts, batch.seq_len
    cap = cfg.capacity(S) if capacity is None else int(capacity)
    if cap <= 0:
        raise ValueError("zero capacity")

    # Position of each slot among the slots routed to the same expert.
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=E)
    starts = np.cumsum(counts) - counts
    rank = np.empty_like(order)
    rank[order] = np.arange(flat.size) - starts[flat[order]]

    slots = np.full((E, cap), PLACEHOLDER, dtype=np.int64)
    keep = rank < cap
    ids = np.arange(flat.size)
    slots[flat[keep], rank[keep]] = ids[keep]
    dropped = tuple((int(s) // cfg.top_k, int(flat[s])) for s in ids[~keep])
    return StaticDispatchPlan(
        capacity=cap,
        slots=_frozen(slots),
        dropped=dropped,
        seq_len=S,
        num_experts=E,
        top_k=cfg.top_k,
        experts=batch.experts,
        weights=batch.weights,
    )


def dynamic_dispatch(batch: Batch, cfg: GatingConfig) -> DynamicDispatchPlan:
    """Stable argsort of assignment slots by expert id, plus per-expert counts."""
    flat = _check_batch(batch, cfg, "dynamic")
    counts = np.bincount(flat, minlength=cfg.num_experts)
    return DynamicDispatchPlan(
        order=_frozen(np.argsort(flat, kind="stable")),
        counts=_frozen(counts),
        splits=_frozen(np.concatenate([[0], np.cumsum(counts)])),
        seq_len=batch.seq_len,
        num_experts=cfg.num_experts,
        top_k=cfg.top_k,
        experts=batch.experts,
        weights=batch.weights,
    )


def dispatch_payloads(plan: DispatchPlan, token_payloads: Sequence) -> list[list]:
    """Reorder per-token payloads into per-expert inputs.

    Static rows keep their placeholders as ``None``.
    """
    if len(token_payloads) != plan.seq_len:
        raise ValueError(f"{len(token_payloads)} payloads for a batch of {plan.seq_len} tokens")
    k = plan.top_k
    if isinstance(plan, DynamicDispatchPlan):
        return [[token_payloads[s // k] for s in plan.segment(e).tolist()] for e in range(plan.num_experts)]
    return [[None if s == PLACEHOLDER else token_payloads[s // k] for s in row] for row in plan.slots.tolist()]


_MISSING = object()


def combine(plan: DispatchPlan, expert_outputs: Sequence[Sequence]) -> list[list[tuple[Any, float]]]:
    """Send expert outputs back to token order.

    Returns, for each token, the ``(payload, gate_weight)`` pairs of the
    assignments that were processed, in top-k order.  Dropped assignments and
    placeholders contribute nothing.
    """
    E, k = plan.num_experts, plan.top_k
    if len(expert_outputs) != E:
        raise ValueError(f"expected outputs for {E} experts, got {len(expert_outputs)}")
    out = [_MISSING] * (plan.seq_len * k)
    if isinstance(plan, DynamicDispatchPlan):
        for e in range(E):
            seg = plan.segment(e)
            if len(expert_outputs[e]) != seg.size:
                raise ValueError(f"expert {e}: {len(expert_outputs[e])} payloads, plan dispatched {seg.size}")
            for s, payload in zip(seg.tolist(), expert_outputs[e]):
                out[s] = payload
    else:
        for e, row in enumerate(plan.slots.tolist()):
            if len(expert_outputs[e]) != plan.capacity:
                raise ValueError(f"expert {e}: {len(expert_outputs[e])} payloads, capacity is {plan.capacity}")
            for s, payload in zip(row, expert_outputs[e]):
                if s != PLACEHOLDER:
                    out[s] = payload
    w = plan.weights.tolist()
    return [
        [(out[t * k + j], w[t][j]) for j in range(k) if out[t * k + j] is not _MISSING]
        for t in range(plan.seq_len)
    ]


@dataclass(frozen=True)
class WasteFactor:
    """Provisioned static slots over real assignments, ``E * C / k``."""

    value: Fraction

    def __float__(self) -> float:
        return float(self.value)

    def __eq__(self, other):
        if isinstance(other, WasteFactor):
            return self.value == other.value
        try:
            return self.value == other
        except TypeError:
            return NotImplemented

    def __hash__(self):
        return hash(self.value)


def waste_factor(num_experts, capacity_factor, top_k) -> WasteFactor:
    E, C, k = (as_fraction(x) for x in (num_experts, capacity_factor, top_k))
    if E <= 0 or C <= 0 or k <= 0:
        raise ValueError(f"waste factor needs positive inputs, got E={E}, C={C}, k={k}")
    return WasteFactor(E * C / k)


def dispatch_mask_elements(seq_len: int, num_experts: int, capacity_factor) -> int:
    """Elements of the static ``(E, S, ceil(C * S))`` dispatch mask."""
    return num_experts * seq_len * expert_capacity(seq_len, capacity_factor)


def merge_argsort(keys: Sequence[int]) -> tuple[list[int], int]:
    """Stable bottom-up merge argsort that also counts key comparisons."""
    order = list(range(len(keys)))
    n = len(order)
    comparisons = 0
    width = 1
    buf = [0] * n
    while width < n:
        for lo in range(0, n, 2 * width):
            mid, hi = min(lo + width, n), min(lo + 2 * width, n)
            i, j, out = lo, mid, lo
            while i < mid and j < hi:
                comparisons += 1
                if keys[order[j]] < keys[order[i]]:
                    buf[out] = order[j]
                    j += 1
                else:
                    buf[out] = order[i]
                    i += 1
                out += 1
            buf[out:out + mid - i] = order[i:mid]
            out += mid - i
            buf[out:out + hi - j] = order[j:hi]
        order, buf = buf, order
        width *= 2
    return order, comparisons


def dispatch_cost_counts(plan: DynamicDispatchPlan, token_dim: int) -> dict[str, int]:
    """Operation counts of dynamic dispatch: sort, bin-count and gather."""
    n = plan.seq_len * plan.top_k
    _, comparisons = merge_argsort(plan.experts.ravel().tolist())
    return {"comparisons": comparisons, "count_passes": n, "gather_elements": n * int(token_dim)}
