"""Command-line experiment runner.

Subcommands: ``gen-trace``, ``simulate``, ``balance``, ``cache-sweep`` and
``stats``.  Every run writes CSV reports plus a ``manifest.json`` echoing the
resolved configuration, so a run can be repeated exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .balance import POLICIES as BALANCE_POLICIES
from .balance import Placement, contiguous_place, eval_balance, place
from .buffer import POLICIES as CACHE_POLICIES
from .buffer import CacheConfig, cache_sweep, run_cache_sim, write_sweep_csv
from .costmodel import ComputeParams, model_latency, model_memory, write_components_csv
from .exchange import Topology, plan_dynamic_exchange, plan_static_exchange, simulate_exchange, write_comm_rows
from .gating import GatingConfig, dynamic_dispatch, static_dispatch, waste_factor
from .trace import (
    SyntheticSpec,
    TokenTrace,
    aggregate_loads,
    gen_synthetic_trace,
    load_token_trace,
    save_token_trace,
    sparsity_stats,
    split_trace,
)

log = logging.getLogger("moesim")


class ConfigError(ValueError):
    pass


def _fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(x.numerator) if x.denominator == 1 else repr(float(x))
    if isinstance(x, (bool, str)):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_metrics(path: Path, metrics: dict[str, Any]) -> None:
    _write_rows(path, ("metric", "value"), [(k, _fmt(v)) for k, v in metrics.items()])


def _write_manifest(out: Path, command: str, config: dict, seed: int | None) -> None:
    manifest = {"command": command, "version": __version__, "seed": seed, "config": config}
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass
class ExperimentConfig:
    """Resolved ``simulate`` configuration.

    JSON layout::

        {"trace": {"path": ...} | {"synthetic": {...SyntheticSpec fields}},
         "gating": {"num_experts", "top_k", "capacity_factor", "modes": [...]},
         "topology": {"num_devices", "size_msg_bytes", "residency",
                      "link_bandwidth", "link_latency"},
         "cache": null | {"cache_size", "policy", "cpu_gpu_bandwidth"},
         "balance": {"policy", "weight"},
         "compute": {...ComputeParams fields},
         "out": "results", "seed": 0}
    """

    trace_path: Path | None
    synthetic: SyntheticSpec | None
    gating: GatingConfig
    modes: tuple[str, ...]
    topology: Topology
    link_bandwidth: float
    link_latency: float
    cache: CacheConfig | None
    balance_policy: str
    balance_weight: float
    compute: ComputeParams
    out: Path
    seed: int
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, cfg: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        known = {"trace", "gating", "topology", "cache", "balance", "compute", "out", "seed"}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        seed = cfg.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed: expected an integer, got {seed!r}")

        gating = dict(cfg.get("gating") or {})
        modes = gating.pop("modes", None) or [gating.pop("mode", "static")]
        gating.pop("mode", None)
        if isinstance(modes, str):
            modes = [modes]
        for m in modes:
            if m not in ("static", "dynamic"):
                raise ConfigError(f"gating.modes: unknown mode {m!r}")

        trace = cfg.get("trace") or {}
        trace_path = synthetic = None
        if "path" in trace:
            trace_path = Path(trace["path"])
            if not trace_path.is_absolute():
                trace_path = base_dir / trace_path
            if not trace_path.exists():
                raise ConfigError(f"trace.path: file not found: {trace_path}")
        elif "synthetic" in trace:
            syn = dict(trace["synthetic"])
            syn.setdefault("num_experts", gating.get("num_experts"))
            syn.setdefault("top_k", gating.get("top_k", 1))
            syn["seed"] = seed
            synthetic = _build(SyntheticSpec, "trace.synthetic", syn)
            gating.setdefault("num_experts", synthetic.num_experts)
            gating.setdefault("top_k", synthetic.top_k)
        else:
            raise ConfigError("trace: give either 'path' or 'synthetic'")

        gating_cfg = _build(GatingConfig, "gating", {**gating, "mode": modes[0]})
        if synthetic is not None and (synthetic.num_experts, synthetic.top_k) != (gating_cfg.num_experts, gating_cfg.top_k):
            raise ConfigError("gating: num_experts/top_k disagree with trace.synthetic")

        compute = _build(ComputeParams, "compute", dict(cfg.get("compute") or {}))

        topo = dict(cfg.get("topology") or {})
        link_bandwidth = topo.pop("link_bandwidth", 300e9)
        link_latency = topo.pop("link_latency", 5e-6)
        topo.setdefault("num_experts", gating_cfg.num_experts)
        topo.setdefault("token_bytes", compute.token_bytes)
        if topo["num_experts"] != gating_cfg.num_experts:
            raise ConfigError("topology.num_experts: disagrees with gating.num_experts")
        topology = _build(Topology, "topology", topo)
        try:
            link_bandwidth = float(link_bandwidth)
            link_latency = float(link_latency)
            if link_bandwidth <= 0 or link_latency < 0:
                raise ValueError
        except (TypeError, ValueError):
            raise ConfigError("topology.link_bandwidth/link_latency: expected bandwidth > 0, latency >= 0") from None

        cache = None
        if cfg.get("cache"):
            c = dict(cfg["cache"])
            c.setdefault("expert_bytes", compute.expert_bytes)
            cache = _build(CacheConfig, "cache", c)

        bal = dict(cfg.get("balance") or {})
        policy = bal.get("policy", "contiguous")
        if policy not in BALANCE_POLICIES:
            raise ConfigError(f"balance.policy: unknown policy {policy!r}; choose from {BALANCE_POLICIES}")

        return cls(
            trace_path=trace_path,
            synthetic=synthetic,
            gating=gating_cfg,
            modes=tuple(dict.fromkeys(modes)),
            topology=topology,
            link_bandwidth=link_bandwidth,
            link_latency=link_latency,
            cache=cache,
            balance_policy=policy,
            balance_weight=float(bal.get("weight", 0.5)),
            compute=compute,
            out=Path(cfg.get("out", "results")),
            seed=seed,
            raw=cfg,
        )

    def load_trace(self) -> TokenTrace:
        if self.trace_path is not None:
            trace = load_token_trace(self.trace_path)
            if (trace.num_experts, trace.top_k) != (self.gating.num_experts, self.gating.top_k):
                raise ConfigError(
                    f"gating: trace has E={trace.num_experts}, k={trace.top_k}; "
                    f"config says E={self.gating.num_experts}, k={self.gating.top_k}"
                )
            return trace
        return gen_synthetic_trace(self.synthetic)


def run_simulation(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    """Run every requested gating mode over the trace and write the reports."""
    trace = cfg.load_trace()
    loads = aggregate_loads(trace)
    D = cfg.topology.num_devices
    if cfg.balance_policy == "anticorr" and loads.num_batches < 2:
        raise ConfigError("balance.policy: anticorr needs at least 2 batches")
    placement = place(cfg.balance_policy, loads, D, cfg.balance_weight)
    cache_res = run_cache_sim(loads, placement, cfg.cache) if cfg.cache is not None else None

    wf = waste_factor(cfg.gating.num_experts, cfg.gating.capacity_factor, cfg.gating.top_k)
    tokens = sum(b.seq_len for b in trace.batches)
    summary: dict[str, Any] = {
        "waste_factor": wf.value,
        "num_experts": cfg.gating.num_experts,
        "top_k": cfg.gating.top_k,
        "capacity_factor": cfg.gating.capacity_fraction,
        "num_devices": D,
        "num_batches": trace.num_batches,
        "tokens": tokens,
    }
    latency_rows, memory_rows = [], []
    comm_rows = []
    for mode in cfg.modes:
        gcfg = cfg.gating.with_mode(mode)
        sums = dict.fromkeys(("gate", "reorder", "a2a_size", "a2a_payload", "expert_compute", "cpu_gpu_transfer", "total"), 0.0)
        comm_total = None
        dropped = 0
        for b, batch in enumerate(trace.batches):
            if mode == "static":
                plan = static_dispatch(batch, gcfg)
                cp = plan_static_exchange(plan, cfg.topology, placement)
                dropped += len(plan.dropped)
            else:
                plan = dynamic_dispatch(batch, gcfg)
                cp = plan_dynamic_exchange(plan, cfg.topology, placement)
            report = simulate_exchange(cp, cfg.link_bandwidth, cfg.link_latency)
            lb = model_latency(
                mode, plan, report, cfg.compute, placement,
                cache=cache_res.total if cache_res is not None else None, batch=b,
            )
            for name, value in lb.components().items():
                sums[name] += value
            comm_total = [(n, m.astype(np.int64)) for n, m in cp.phases] if comm_total is None else [
                (n, acc + m) for (n, acc), (_, m) in zip(comm_total, cp.phases)
            ]
        latency_rows.append((mode, sums))
        max_s = max(b.seq_len for b in trace.batches)
        mem = model_memory(mode, gcfg, max_s, cfg.topology, cfg.compute, cfg.cache)
        memory_rows.append((mode, mem.components()))
        for name, m in comm_total:
            for i in range(D):
                for j in range(D):
                    comm_rows.append((mode, name, i, j, int(m[i, j])))
        summary[f"{mode}_latency_seconds"] = sums["total"]
        summary[f"{mode}_throughput"] = tokens / sums["total"]
        summary[f"{mode}_peak_memory_bytes"] = mem.peak_bytes
        summary[f"{mode}_payload_bytes"] = sum(int(m.sum()) for n, m in comm_total if n == "payload")
        if mode == "static":
            summary["static_dropped_assignments"] = dropped
    if {"static", "dynamic"} <= set(cfg.modes):
        summary["dynamic_speedup"] = summary["static_latency_seconds"] / summary["dynamic_latency_seconds"]

    write_components_csv(latency_rows, out / "latency.csv", "seconds")
    write_components_csv(memory_rows, out / "memory.csv", "bytes")
    _write_rows(out / "comm.csv", ("mode", "phase", "src", "dst", "bytes"), comm_rows)
    if cache_res is not None:
        c = cfg.cache
        rows = [(c.cache_size, c.policy, str(n), r) for n, r in enumerate(cache_res.devices)]
        rows.append((c.cache_size, c.policy, "all", cache_res.total))
        _write_rows(
            out / "cache.csv",
            ("size", "policy", "device", "miss_rate", "worst_batch_miss_rate", "transfer_seconds"),
            [(s, p, d, _fmt(r.miss_rate), _fmt(r.worst_batch_miss_rate), _fmt(r.transfer_seconds)) for s, p, d, r in rows],
        )
        summary["cache_miss_rate"] = cache_res.total.miss_rate
    _write_metrics(out / "summary.csv", summary)
    placement.to_csv(out / "placement.csv")
    return summary


def _read_config(path: str | None) -> tuple[dict, Path]:
    if not path:
        return {}, Path(".")
    p = Path(path)
    try:
        with open(p, encoding="utf-8") as f:
            return json.load(f), p.parent
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _out_dir(args, cfg: dict) -> Path:
    out = Path(args.out or cfg.get("out") or "results")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_sizes(text: str) -> list[int]:
    sizes = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            sizes.extend(range(int(lo), int(hi) + 1))
        elif part:
            sizes.append(int(part))
    return sizes


def cmd_gen_trace(args) -> int:
    cfg, _ = _read_config(args.config)
    syn = dict(((cfg.get("trace") or {}).get("synthetic")) or {})
    flags = {
        "num_experts": args.experts,
        "top_k": args.topk,
        "num_batches": args.batches,
        "seq_len": args.seqlen,
        "zipf": args.zipf,
        "persistence": args.persist,
        "active_frac": args.active_frac,
    }
    syn.update({k: v for k, v in flags.items() if v is not None})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    syn["seed"] = seed
    if syn.get("num_experts") is None:
        raise ConfigError("--experts is required")
    spec = _build(SyntheticSpec, "trace.synthetic", syn)
    out = _out_dir(args, cfg)
    trace = gen_synthetic_trace(spec)
    save_token_trace(trace, out / "trace.jsonl")
    _write_manifest(out, "gen-trace", asdict(spec), seed)
    log.info("wrote %d batches to %s", trace.num_batches, out / "trace.jsonl")
    return 0


def cmd_simulate(args) -> int:
    raw, base = _read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    if args.trace is not None:
        raw["trace"] = {"path": str(Path(args.trace).resolve())}
    if args.modes is not None:
        raw.setdefault("gating", {})["modes"] = args.modes.split(",")
    cfg = ExperimentConfig.from_dict(raw, base)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    run_simulation(cfg, out)
    _write_manifest(out, "simulate", raw, cfg.seed)
    return 0


def _trace_loads(args, cfg: dict):
    path = args.trace or ((cfg.get("trace") or {}).get("path"))
    if not path:
        raise ConfigError("--trace is required")
    return aggregate_loads(load_token_trace(path))


def cmd_balance(args) -> int:
    cfg, _ = _read_config(args.config)
    loads = _trace_loads(args, cfg)
    if args.policy == "anticorr" and loads.num_batches < 2:
        raise ConfigError("anticorr balancing needs a trace with at least 2 batches")
    if loads.num_batches < 2:
        raise ConfigError("the two-half protocol needs at least 2 batches")
    history, test = split_trace(loads, args.split)
    if args.policy == "anticorr" and history.num_batches < 2:
        raise ConfigError(f"anticorr needs at least 2 history batches; split {args.split} leaves {history.num_batches}")
    out = _out_dir(args, cfg)
    placement = place(args.policy, history, args.devices, args.weight)
    baseline = contiguous_place(loads.num_experts, args.devices)
    report = eval_balance(placement, test)
    base_report = eval_balance(baseline, test)
    placement.to_csv(out / "placement.csv")
    report.to_csv(out / "balance.csv", test.batch_ids)
    metrics = {"policy": args.policy}
    metrics.update(report.summary())
    metrics.update({f"contiguous_{k}": v for k, v in base_report.summary().items()})
    _write_metrics(out / "balance_summary.csv", metrics)
    _write_manifest(
        out, "balance",
        {"trace": args.trace, "devices": args.devices, "policy": args.policy, "split": args.split, "weight": args.weight},
        None,
    )
    return 0


def cmd_cache_sweep(args) -> int:
    cfg, _ = _read_config(args.config)
    loads = _trace_loads(args, cfg)
    if args.placement:
        placement = Placement.from_csv(args.placement, args.devices)
    else:
        if args.devices is None:
            raise ConfigError("give --placement or --devices")
        placement = place(args.balance, loads, args.devices)
    policies = args.policies.split(",")
    for p in policies:
        if p not in CACHE_POLICIES:
            raise ConfigError(f"--policies: unknown policy {p!r}; choose from {CACHE_POLICIES}")
    out = _out_dir(args, cfg)
    rows = cache_sweep(loads, placement, _parse_sizes(args.sizes), policies, args.expert_bytes, args.bandwidth)
    write_sweep_csv(rows, out / "sweep.csv")
    _write_manifest(
        out, "cache-sweep",
        {"trace": args.trace, "placement": args.placement, "devices": placement.num_devices,
         "sizes": args.sizes, "policies": policies, "expert_bytes": args.expert_bytes, "bandwidth": args.bandwidth},
        None,
    )
    return 0


def cmd_stats(args) -> int:
    cfg, _ = _read_config(args.config)
    loads = _trace_loads(args, cfg)
    out = _out_dir(args, cfg)
    rep = sparsity_stats(loads)
    loads.to_csv(out / "loads.csv")
    _write_rows(
        out / "sparsity.csv",
        ("batch", "inactive", "top_share"),
        [(bid, int(n), _fmt(s)) for bid, n, s in zip(loads.batch_ids, rep.inactive_per_batch, rep.top_share_per_batch)],
    )
    _write_metrics(
        out / "stats_summary.csv",
        {
            "num_experts": loads.num_experts,
            "num_batches": loads.num_batches,
            "mean_inactive_fraction": rep.mean_inactive_fraction,
            "max_inactive_fraction": rep.max_inactive_fraction,
            "never_active": rep.num_never_active,
            "max_top_share": float(rep.top_share_per_batch.max()),
        },
    )
    _write_manifest(out, "stats", {"trace": args.trace}, None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="moesim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", parents=[common], help="write a synthetic JSONL trace")
    p.add_argument("--experts", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--seqlen", type=int)
    p.add_argument("--zipf", type=float)
    p.add_argument("--persist", type=float)
    p.add_argument("--active-frac", type=float)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("simulate", parents=[common], help="run gating/exchange/cache/cost models")
    p.add_argument("--trace", help="trace file (overrides the config's trace section)")
    p.add_argument("--modes", help="comma-separated gating modes, e.g. static,dynamic")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("balance", parents=[common], help="two-half placement evaluation")
    p.add_argument("--trace")
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--policy", choices=BALANCE_POLICIES, default="greedy")
    p.add_argument("--split", type=float, default=0.5)
    p.add_argument("--weight", type=float, default=0.5, help="anti-correlation weight")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("cache-sweep", parents=[common], help="miss rates over cache sizes and policies")
    p.add_argument("--trace")
    p.add_argument("--placement", help="placement CSV (expert,device)")
    p.add_argument("--devices", type=int)
    p.add_argument("--balance", choices=BALANCE_POLICIES, default="contiguous", help="placement when no CSV is given")
    p.add_argument("--sizes", default="1-16", help="e.g. 1-16 or 1,2,4,8")
    p.add_argument("--policies", default="LIFO,FIFO,MIN")
    p.add_argument("--expert-bytes", type=float, default=1.0)
    p.add_argument("--bandwidth", type=float, default=12e9)
    p.set_defaults(func=cmd_cache_sweep)

    p = sub.add_parser("stats", parents=[common], help="load matrix and sparsity statistics")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"moesim {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
