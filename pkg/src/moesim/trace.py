"""Token-level routing traces and the per-batch load matrices derived from them.

A trace records, for every token of every batch, the ``k`` experts the gate
picked and the gate weight of each pick.  Everything downstream (balancing,
cache simulation) works on the aggregated :class:`LoadMatrix`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._validation import COLUMN_SUM_TOL, as_fraction, check_load_array, check_positive_int

TRACE_VERSION = 1


class TraceError(ValueError):
    """Malformed trace file or a trace that violates its invariants."""

    def __init__(self, message: str, *, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TokenAssignment:
    token_index: int
    experts: tuple[int, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class Batch:
    """One batch of ``S`` tokens, each routed to ``k`` experts.

    ``experts`` and ``weights`` are read-only ``(S, k)`` arrays.
    """

    batch_id: int
    experts: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        experts = np.asarray(self.experts)
        if experts.ndim != 2 or experts.shape[0] < 1 or experts.shape[1] < 1:
            raise TraceError(f"batch {self.batch_id}: expected a non-empty (S, k) expert array")
        if not np.issubdtype(experts.dtype, np.integer):
            raise TraceError(f"batch {self.batch_id}: expert ids must be integers")
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != experts.shape:
            raise TraceError(
                f"batch {self.batch_id}: weights shape {weights.shape} != experts shape {experts.shape}"
            )
        object.__setattr__(self, "experts", _frozen(experts.astype(np.int64)))
        object.__setattr__(self, "weights", _frozen(weights))

    @classmethod
    def from_tokens(cls, batch_id: int, tokens: Sequence[TokenAssignment | tuple]) -> "Batch":
        experts, weights = [], []
        for tok in tokens:
            if isinstance(tok, TokenAssignment):
                e, w = tok.experts, tok.weights
            else:
                e, w = tok
            experts.append(list(e))
            weights.append(list(w))
        return cls(batch_id, np.array(experts, dtype=np.int64), np.array(weights, dtype=np.float64))

    @property
    def seq_len(self) -> int:
        return self.experts.shape[0]

    @property
    def top_k(self) -> int:
        return self.experts.shape[1]

    @property
    def tokens(self) -> list[TokenAssignment]:
        return [
            TokenAssignment(t, tuple(int(e) for e in self.experts[t]), tuple(float(w) for w in self.weights[t]))
            for t in range(self.seq_len)
        ]

    def validate(self, num_experts: int, top_k: int, *, line: int | None = None) -> None:
        """Raise :class:`TraceError` naming the first offending token."""
        where = f"batch {self.batch_id}"
        e, w = self.experts, self.weights
        if e.shape[1] != top_k:
            raise TraceError(f"{where}: tokens carry {e.shape[1]} experts, header says top_k={top_k}", line=line)
        bad = np.argwhere((e < 0) | (e >= num_experts))
        if bad.size:
            t, j = bad[0]
            raise TraceError(
                f"{where} token {t}: expert id out of range ({int(e[t, j])} not in [0, {num_experts}))",
                line=line,
            )
        if top_k > 1:
            s = np.sort(e, axis=1)
            dup = np.flatnonzero(np.any(s[:, 1:] == s[:, :-1], axis=1))
            if dup.size:
                raise TraceError(f"{where} token {dup[0]}: duplicate expert in top-k", line=line)
        neg = np.argwhere(w < 0)
        if neg.size:
            raise TraceError(f"{where} token {neg[0][0]}: negative gate weight", line=line)
        off = np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > COLUMN_SUM_TOL)
        if off.size:
            raise TraceError(f"{where} token {off[0]}: weights do not sum to 1", line=line)


@dataclass(frozen=True, eq=False)
class TokenTrace:
    num_experts: int
    top_k: int
    batches: tuple[Batch, ...]

    def __post_init__(self):
        check_positive_int(self.num_experts, "num_experts")
        check_positive_int(self.top_k, "top_k")
        if self.top_k > self.num_experts:
            raise TraceError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        batches = tuple(self.batches)
        prev = -1
        for b in batches:
            if b.batch_id < 0 or b.batch_id <= prev:
                raise TraceError(f"batch ids must be nonnegative and strictly increasing (got {b.batch_id} after {prev})")
            prev = b.batch_id
            b.validate(self.num_experts, self.top_k)
        object.__setattr__(self, "batches", batches)

    @property
    def num_batches(self) -> int:
        return len(self.batches)

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


@dataclass(frozen=True, eq=False)
class LoadMatrix:
    """``A[m, b]``: share of batch ``b``'s assignment slots routed to expert ``m``."""

    A: np.ndarray
    batch_ids: tuple[int, ...] = ()

    def __post_init__(self):
        A = check_load_array(self.A)
        ids = tuple(int(i) for i in self.batch_ids) or tuple(range(A.shape[1]))
        if len(ids) != A.shape[1]:
            raise ValueError(f"{len(ids)} batch ids for {A.shape[1]} columns")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "batch_ids", ids)

    @property
    def num_experts(self) -> int:
        return self.A.shape[0]

    @property
    def num_batches(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.A, dtype=dtype)

    def columns(self, start: int, stop: int) -> "LoadMatrix":
        return LoadMatrix(self.A[:, start:stop], self.batch_ids[start:stop])

    def active_sets(self) -> list[frozenset[int]]:
        """Experts with a positive load, per batch."""
        return [frozenset(np.flatnonzero(self.A[:, b] > 0).tolist()) for b in range(self.num_batches)]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["expert"] + [f"b{i}" for i in self.batch_ids])
            for m in range(self.num_experts):
                w.writerow([m] + [repr(float(x)) for x in self.A[m]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LoadMatrix":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "expert":
            raise ValueError(f"{path}: expected header starting with 'expert'")
        ids = [int(h.lstrip("b")) for h in header[1:]]
        body.sort(key=lambda r: int(r[0]))
        A = np.array([[float(x) for x in r[1:]] for r in body])
        return cls(A, tuple(ids))


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic workload generator.

    ``zipf`` is the skew exponent of expert popularity, ``persistence`` the
    chance that the hot-expert ranking carries over to the next batch, and
    ``active_frac`` the share of experts that can receive tokens in a batch.
    """

    num_experts: int
    top_k: int = 2
    num_batches: int = 100
    seq_len: int = 2048
    zipf: float = 1.2
    persistence: float = 0.9
    active_frac: float = 1.0
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.num_experts, "num_experts")
        check_positive_int(self.top_k, "top_k")
        check_positive_int(self.num_batches, "num_batches")
        check_positive_int(self.seq_len, "seq_len")
        if not self.zipf >= 0:
            raise ValueError(f"zipf must be >= 0, got {self.zipf}")
        if not 0 <= self.persistence <= 1:
            raise ValueError(f"persistence must lie in [0, 1], got {self.persistence}")
        if not 0 < self.active_frac <= 1:
            raise ValueError(f"active_frac must lie in (0, 1], got {self.active_frac}")

    @property
    def num_active(self) -> int:
        return math.ceil(as_fraction(self.active_frac) * self.num_experts)


@dataclass(frozen=True, eq=False)
class SparsityReport:
    inactive_per_batch: np.ndarray
    top_share_per_batch: np.ndarray
    expert_mean_load: np.ndarray
    never_active: tuple[int, ...]
    num_experts: int

    @property
    def mean_inactive_fraction(self) -> float:
        return float(self.inactive_per_batch.mean() / self.num_experts)

    @property
    def max_inactive_fraction(self) -> float:
        return float(self.inactive_per_batch.max() / self.num_experts)

    @property
    def num_never_active(self) -> int:
        return len(self.never_active)


def _parse_json(line: str, lineno: int):
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceError(f"invalid JSON: {exc.msg}", line=lineno) from None


def load_token_trace(path: str | Path) -> TokenTrace:
    """Read and validate a JSON Lines trace file."""
    batches: list[Batch] = []
    header = None
    prev_id = -1
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = _parse_json(line, lineno)
            if header is None:
                if not isinstance(obj, dict) or {"version", "num_experts", "top_k"} - obj.keys():
                    raise TraceError("header must carry version, num_experts and top_k", line=lineno)
                if obj["version"] != TRACE_VERSION:
                    raise TraceError(f"unsupported trace version {obj['version']!r}", line=lineno)
                header = obj
                E, k = int(obj["num_experts"]), int(obj["top_k"])
                if E < 1 or not 1 <= k <= E:
                    raise TraceError(f"bad header sizes num_experts={E} top_k={k}", line=lineno)
                continue
            try:
                batch_id = int(obj["batch_id"])
                toks = obj["tokens"]
                experts = [tok["e"] for tok in toks]
                weights = [tok["w"] for tok in toks]
            except (KeyError, TypeError, ValueError):
                raise TraceError("batch lines need batch_id and tokens[{e, w}]", line=lineno) from None
            if not toks:
                raise TraceError(f"batch {batch_id}: no tokens", line=lineno)
            for t, (e, w) in enumerate(zip(experts, weights)):
                if len(e) != k or len(w) != k:
                    raise TraceError(f"batch {batch_id} token {t}: expected {k} experts and weights", line=lineno)
            if batch_id <= prev_id:
                raise TraceError(f"batch_id {batch_id} not greater than previous {prev_id}", line=lineno)
            prev_id = batch_id
            try:
                batch = Batch(batch_id, np.array(experts, dtype=np.int64), np.array(weights, dtype=np.float64))
            except (TypeError, ValueError) as exc:
                raise TraceError(str(exc), line=lineno) from None
            batch.validate(E, k, line=lineno)
            batches.append(batch)
    if header is None:
        raise TraceError("empty trace file", line=1)
    return TokenTrace(E, k, tuple(batches))


def save_token_trace(trace: TokenTrace, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"version": TRACE_VERSION, "num_experts": trace.num_experts, "top_k": trace.top_k}))
        f.write("\n")
        for b in trace.batches:
            tokens = [{"e": e, "w": w} for e, w in zip(b.experts.tolist(), b.weights.tolist())]
            f.write(json.dumps({"batch_id": b.batch_id, "tokens": tokens}, separators=(",", ":")))
            f.write("\n")


def batch_loads(batch: Batch, num_experts: int) -> np.ndarray:
    counts = np.bincount(batch.experts.ravel(), minlength=num_experts)
    return counts / counts.sum()


def aggregate_loads(trace: TokenTrace) -> LoadMatrix:
    """Per-batch share of the ``k * S_b`` assignment slots taken by each expert."""
    A = np.column_stack([batch_loads(b, trace.num_experts) for b in trace.batches])
    return LoadMatrix(A, tuple(b.batch_id for b in trace.batches))


def gen_synthetic_trace(spec: SyntheticSpec) -> TokenTrace:
    """Draw a skewed, sparse, temporally local trace.

    Each batch ranks ``ceil(active_frac * E)`` experts by a random permutation
    and gives rank ``r`` popularity proportional to ``(r + 1) ** -zipf``.  The
    permutation is reused from the previous batch with probability
    ``persistence``.  Tokens draw ``k`` distinct experts without replacement
    (Gumbel top-k), and gate weights are uniform draws normalized to 1.
    """
    E, k, S = spec.num_experts, spec.top_k, spec.seq_len
    n_active = spec.num_active
    if n_active < k:
        raise ValueError(f"not enough active experts for top-k ({n_active} active, k={k})")
    rng = np.random.default_rng(spec.seed)
    logp = -spec.zipf * np.log(np.arange(1, n_active + 1, dtype=np.float64))
    perm = None
    batches = []
    for b in range(spec.num_batches):
        if perm is None or rng.random() >= spec.persistence:
            perm = rng.permutation(E)[:n_active]
        keys = logp + rng.gumbel(size=(S, n_active))
        top = np.argpartition(-keys, k - 1, axis=1)[:, :k]
        order = np.argsort(-np.take_along_axis(keys, top, axis=1), axis=1, kind="stable")
        ranks = np.take_along_axis(top, order, axis=1)
        w = 1.0 - rng.random((S, k))
        w /= w.sum(axis=1, keepdims=True)
        batches.append(Batch(b, perm[ranks], w))
    return TokenTrace(E, k, tuple(batches))


def split_trace(loads: LoadMatrix, fraction: float = 0.5) -> tuple[LoadMatrix, LoadMatrix]:
    """Split batches into ``[0, floor(fraction * B))`` and the rest."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    B = loads.num_batches
    cut = math.floor(as_fraction(fraction) * B)
    if cut == 0 or cut == B:
        raise ValueError(f"splitting {B} batch(es) at {fraction} leaves an empty part")
    return loads.columns(0, cut), loads.columns(cut, B)


def sparsity_stats(loads: LoadMatrix) -> SparsityReport:
    A = loads.A
    active = A > 0
    return SparsityReport(
        inactive_per_batch=_frozen((~active).sum(axis=0)),
        top_share_per_batch=_frozen(A.max(axis=0)),
        expert_mean_load=_frozen(A.mean(axis=1)),
        never_active=tuple(np.flatnonzero(~active.any(axis=1)).tolist()),
        num_experts=loads.num_experts,
    )


def concat_loads(parts: Iterable[LoadMatrix]) -> LoadMatrix:
    parts = list(parts)
    return LoadMatrix(
        np.concatenate([p.A for p in parts], axis=1),
        tuple(i for p in parts for i in p.batch_ids),
    )
