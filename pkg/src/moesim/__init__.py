"""Trace-driven simulator for Mixture-of-Experts inference routing.

Covers static-capacity vs. dynamic gating, expert buffering (per-device expert
caches) and load-balanced expert placement, with analytical latency and
memory models on top.
"""

__version__ = "0.1.0"

from .balance import (
    AntiCorrPlacer,
    BalanceReport,
    ContiguousPlacer,
    CorrMatrix,
    GreedyPlacer,
    Placement,
    anticorr_place,
    contiguous_place,
    eval_balance,
    greedy_place,
    pearson_corr,
)
from .buffer import CacheConfig, CacheState, MissReport, access_batch, cache_sweep, run_cache_sim, transfer_time
from .costmodel import ComputeParams, LatencyBreakdown, MemoryBreakdown, model_latency, model_memory, throughput
from .exchange import CommPlan, CommReport, Topology, plan_dynamic_exchange, plan_static_exchange, simulate_exchange
from .gating import (
    PLACEHOLDER,
    DynamicDispatchPlan,
    GatingConfig,
    StaticDispatchPlan,
    WasteFactor,
    combine,
    dispatch_cost_counts,
    dispatch_mask_elements,
    dispatch_payloads,
    dynamic_dispatch,
    static_dispatch,
    waste_factor,
)
from .trace import (
    Batch,
    LoadMatrix,
    SparsityReport,
    SyntheticSpec,
    TokenAssignment,
    TokenTrace,
    TraceError,
    aggregate_loads,
    gen_synthetic_trace,
    load_token_trace,
    save_token_trace,
    sparsity_stats,
    split_trace,
)
