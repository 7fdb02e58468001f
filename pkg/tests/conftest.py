import numpy as np
import pytest

from moesim.trace import Batch

ACCEPTANCE_LINES: list[str] = []


def uniform_batch(S, E, k, batch_id=0):
    """Deterministic batch where every expert gets exactly k*S/E assignments."""
    assert (k * S) % E == 0
    experts = (np.arange(S)[:, None] * k + np.arange(k)[None, :]) % E
    return Batch(batch_id, experts, np.full((S, k), 1.0 / k))


def random_batch(rng, S, E, k, batch_id=0, skew=None):
    p = None
    if skew is not None:
        p = rng.dirichlet(np.full(E, skew))
        p = np.maximum(p, 1e-12)
        p /= p.sum()
    experts = np.stack([rng.choice(E, size=k, replace=False, p=p) for _ in range(S)])
    w = rng.random((S, k)) + 1e-3
    return Batch(batch_id, experts, w / w.sum(axis=1, keepdims=True))


def brute_force_fill(assignments, E, capacity):
    """Slot-by-slot static fill; returns (rows, dropped) with token indices."""
    rows = [[] for _ in range(E)]
    dropped = []
    for t, experts in enumerate(assignments):
        for e in experts:
            if len(rows[e]) < capacity:
                rows[e].append(t)
            else:
                dropped.append((t, e))
    return rows, dropped


def reference_lifo_fifo(seq, size, policy):
    """Oracle: plain-list simulation of inactive-first then LIFO/FIFO eviction."""
    stack, misses, victims = [], 0, []
    for active in seq:
        for x in sorted(active):
            if x in stack:
                continue
            misses += 1
            if len(stack) == size:
                idle = [r for r in stack if r not in active]
                if idle:
                    v = idle[-1]
                else:
                    v = stack[-1] if policy == "LIFO" else stack[0]
                stack.remove(v)
                victims.append(v)
            stack.append(x)
    return misses, victims, stack


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    def record(name, passed, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" -- {detail}" if detail else ""))
        assert passed, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
