"""Expert placement across devices from historical load data.

Placements always put exactly ``E / D`` experts on each device.  The greedy
placer walks experts in descending mean load and gives each to the least
loaded device that still has room; the anti-correlation placer adds
``weight * corr(a, m)`` for every expert ``m`` already on a candidate device,
which pushes co-activating experts apart.

The placers follow the scikit-learn estimator protocol with experts as
samples and batches as features, so ``fit_predict(A)`` returns a device label
per expert.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_divisible, check_load_array

POLICIES = ("contiguous", "greedy", "anticorr")


@dataclass(frozen=True, eq=False)
class Placement:
    """Expert-to-device map with exactly ``E / D`` experts per device."""

    device_of: np.ndarray
    num_devices: int

    def __post_init__(self):
        dev = np.array(self.device_of, dtype=np.int64, copy=True)
        if dev.ndim != 1 or dev.size == 0:
            raise ValueError("device_of must be a non-empty 1-d array")
        per = check_divisible(dev.size, self.num_devices)
        if dev.min() < 0 or dev.max() >= self.num_devices:
            raise ValueError(f"device ids must lie in [0, {self.num_devices})")
        counts = np.bincount(dev, minlength=self.num_devices)
        if np.any(counts != per):
            n = int(np.flatnonzero(counts != per)[0])
            raise ValueError(f"device {n} holds {counts[n]} experts, expected {per}")
        dev.setflags(write=False)
        object.__setattr__(self, "device_of", dev)
        object.__setattr__(self, "num_devices", int(self.num_devices))

    @property
    def num_experts(self) -> int:
        return self.device_of.size

    @property
    def experts_per_device(self) -> int:
        return self.num_experts // self.num_devices

    @property
    def P(self) -> np.ndarray:
        """Boolean ``(E, D)`` placement matrix."""
        P = np.zeros((self.num_experts, self.num_devices), dtype=bool)
        P[np.arange(self.num_experts), self.device_of] = True
        return P

    def experts_on(self, device: int) -> np.ndarray:
        return np.flatnonzero(self.device_of == device)

    def __eq__(self, other):
        if not isinstance(other, Placement):
            return NotImplemented
        return self.num_devices == other.num_devices and np.array_equal(self.device_of, other.device_of)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["expert", "device"])
            w.writerows(enumerate(self.device_of.tolist()))

    @classmethod
    def from_csv(cls, path: str | Path, num_devices: int | None = None) -> "Placement":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        rows.sort(key=lambda r: int(r["expert"]))
        if [int(r["expert"]) for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: expert ids must be 0..E-1 with no gaps")
        dev = np.array([int(r["device"]) for r in rows])
        return cls(dev, num_devices if num_devices is not None else int(dev.max()) + 1)


@dataclass(frozen=True, eq=False)
class CorrMatrix:
    S: np.ndarray


@dataclass(frozen=True, eq=False)
class BalanceReport:
    """Per-device load shares ``L[n, b]`` on an evaluation trace."""

    L: np.ndarray

    @property
    def num_devices(self) -> int:
        return self.L.shape[0]

    @property
    def max_load(self) -> float:
        return float(self.L.max())

    @property
    def avg_max_load(self) -> float:
        return float(self.L.max(axis=0).mean())

    @property
    def objective(self) -> float:
        return float(np.abs(self.L - 1.0 / self.num_devices).max())

    def summary(self) -> dict[str, float]:
        return {"max_load": self.max_load, "avg_max_load": self.avg_max_load, "objective": self.objective}

    def to_csv(self, path: str | Path, batch_ids=None) -> None:
        ids = list(batch_ids) if batch_ids is not None else list(range(self.L.shape[1]))
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["batch", "device", "load"])
            for b, bid in enumerate(ids):
                for n in range(self.num_devices):
                    w.writerow([bid, n, repr(float(self.L[n, b]))])


def contiguous_place(num_experts: int, num_devices: int) -> Placement:
    per = check_divisible(num_experts, num_devices)
    return Placement(np.arange(num_experts) // per, num_devices)


def pearson_corr(history) -> CorrMatrix:
    """Pairwise Pearson correlation of expert load series.

    Constant series correlate 0 with everything, themselves included.
    """
    A = check_load_array(history)
    if A.shape[1] < 2:
        raise ValueError("Pearson correlation needs at least 2 batches")
    varying = np.ptp(A, axis=1) > 0
    X = A - A.mean(axis=1, keepdims=True)
    X[~varying] = 0.0
    norm = np.sqrt((X * X).sum(axis=1))
    norm[~varying] = 1.0
    Z = X / norm[:, None]
    S = np.clip(Z @ Z.T, -1.0, 1.0)
    S = (S + S.T) / 2
    np.fill_diagonal(S, varying.astype(np.float64))
    S.setflags(write=False)
    return CorrMatrix(S)


def _assign(mean_load: np.ndarray, num_devices: int, corr: np.ndarray | None = None, weight: float = 0.0) -> Placement:
    E = mean_load.size
    per = check_divisible(E, num_devices)
    order = np.argsort(-mean_load, kind="stable")
    device_of = np.full(E, -1, dtype=np.int64)
    members = np.zeros((E, num_devices))  # running membership matrix
    load = np.zeros(num_devices)
    count = np.zeros(num_devices, dtype=np.int64)
    use_corr = corr is not None and weight != 0
    for a in order:
        score = load + weight * (corr[a] @ members) if use_corr else load
        score = np.where(count < per, score, np.inf)
        n = int(np.argmin(score))
        device_of[a] = n
        members[a, n] = 1.0
        load[n] += mean_load[a]
        count[n] += 1
    return Placement(device_of, num_devices)


def greedy_place(history, num_devices: int) -> Placement:
    """Descending-mean-load greedy with an exact per-device expert quota."""
    A = check_load_array(history)
    return _assign(A.mean(axis=1), num_devices)


def anticorr_place(history, num_devices: int, weight: float = 0.5) -> Placement:
    """Greedy placement with the device score penalized by correlation to residents."""
    A = check_load_array(history)
    return _assign(A.mean(axis=1), num_devices, pearson_corr(A).S, weight)


def eval_balance(p: Placement, test) -> BalanceReport:
    A = check_load_array(test)
    if A.shape[0] != p.num_experts:
        raise ValueError(f"placement covers {p.num_experts} experts, loads have {A.shape[0]}")
    L = p.P.T.astype(np.float64) @ A
    L.setflags(write=False)
    return BalanceReport(L)


def place(policy: str, history, num_devices: int, weight: float = 0.5) -> Placement:
    if policy == "contiguous":
        return contiguous_place(check_load_array(history).shape[0], num_devices)
    if policy == "greedy":
        return greedy_place(history, num_devices)
    if policy == "anticorr":
        return anticorr_place(history, num_devices, weight)
    raise ValueError(f"unknown balancing policy {policy!r}; choose from {POLICIES}")


class _BasePlacer(ClusterMixin, BaseEstimator):
    def fit(self, X, y=None):
        A = check_load_array(X, min_batches=self._min_batches)
        self.placement_ = self._place(A)
        self.labels_ = self.placement_.device_of.copy()
        self.mean_load_ = A.mean(axis=1)
        return self

    def predict(self, X=None):
        """Device of every expert; ``X`` only has its expert count checked."""
        check_is_fitted(self, "placement_")
        if X is not None:
            A = check_load_array(X)
            if A.shape[0] != self.labels_.size:
                raise ValueError(f"fitted on {self.labels_.size} experts, got {A.shape[0]}")
        return self.labels_.copy()

    def evaluate(self, X) -> BalanceReport:
        check_is_fitted(self, "placement_")
        return eval_balance(self.placement_, X)

    def score(self, X, y=None) -> float:
        """Negative Max Load on ``X`` (greater is better)."""
        return -self.evaluate(X).max_load


class ContiguousPlacer(_BasePlacer):
    """Expert ``m`` on device ``m // (E / D)``; ignores the loads."""

    _min_batches = 1

    def __init__(self, n_devices=8):
        self.n_devices = n_devices

    def _place(self, A):
        return contiguous_place(A.shape[0], self.n_devices)


class GreedyPlacer(_BasePlacer):
    _min_batches = 1

    def __init__(self, n_devices=8):
        self.n_devices = n_devices

    def _place(self, A):
        return _assign(A.mean(axis=1), self.n_devices)


class AntiCorrPlacer(_BasePlacer):
    _min_batches = 2

    def __init__(self, n_devices=8, weight=0.5):
        self.n_devices = n_devices
        self.weight = weight

    def _place(self, A):
        self.corr_ = pearson_corr(A).S
        return _assign(A.mean(axis=1), self.n_devices, self.corr_, self.weight)


def make_placer(policy: str, n_devices: int, weight: float = 0.5) -> _BasePlacer:
    if policy == "contiguous":
        return ContiguousPlacer(n_devices)
    if policy == "greedy":
        return GreedyPlacer(n_devices)
    if policy == "anticorr":
        return AntiCorrPlacer(n_devices, weight)
    raise ValueError(f"unknown balancing policy {policy!r}; choose from {POLICIES}")
