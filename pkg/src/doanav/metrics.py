"""Navigation metrics, attention-bias diagnostics and the kNN entropy estimator."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .sim import DONE, MOVE_AHEAD

BIAS_EPS = 1e-8
LONG_PATH_MIN = 5
CHANGE_ACTIONS = frozenset({MOVE_AHEAD})


class EmptyInputError(ValueError):
    """Raised when a metric is asked to summarise zero episodes."""


@dataclass
class EpisodeRecord:
    success: bool
    path_len: int  # actions issued, Done included
    optimal_len: float  # fewest actions to succeed, Done included; inf if unreachable
    actions: list
    target: int
    per_step_attention: list = field(default_factory=list)
    world_seed: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.path_len < 1:
            raise ValueError("path_len must be at least 1")
        if self.optimal_len < 0:
            raise ValueError("optimal_len must be non-negative")
        if self.success and (not self.actions or self.actions[-1] != DONE):
            raise ValueError("a successful episode must end with Done")

    def to_json(self) -> str:
        d = asdict(self)
        d["success"] = bool(d["success"])
        d["optimal_len"] = None if math.isinf(self.optimal_len) else self.optimal_len
        d["per_step_attention"] = [np.asarray(a, dtype=float).tolist() for a in self.per_step_attention]
        d["actions"] = [int(a) for a in self.actions]
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        d = json.loads(line)
        if d.get("optimal_len") is None:
            d["optimal_len"] = math.inf
        return cls(**d)


def write_records(records: Iterable[EpisodeRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list:
    with open(path) as fh:
        return [EpisodeRecord.from_json(line) for line in fh if line.strip()]


def _require(records: Sequence[EpisodeRecord]) -> None:
    if len(records) == 0:
        raise EmptyInputError("no episode records")


def sr(records: Sequence[EpisodeRecord]) -> float:
    _require(records)
    return sum(1.0 for r in records if r.success) / len(records)


def spl(records: Sequence[EpisodeRecord]) -> float:
    _require(records)
    usable = [r for r in records if math.isfinite(r.optimal_len)]
    if len(usable) < len(records):
        warnings.warn(f"{len(records) - len(usable)} record(s) with unreachable target excluded from SPL")
    _require(usable)
    total = 0.0
    for r in usable:
        if r.success:
            total += r.optimal_len / max(r.path_len, r.optimal_len)
    return total / len(usable)


def sae(records: Sequence[EpisodeRecord]) -> float:
    _require(records)
    total = 0.0
    for r in records:
        if r.success:
            total += sum(1 for a in r.actions if a in CHANGE_ACTIONS) / len(r.actions)
    return total / len(records)


def summarize(records: Sequence[EpisodeRecord]) -> dict:
    return {"sr": sr(records), "spl": spl(records), "sae": sae(records), "n": len(records)}


@dataclass
class MetricsReport:
    sr: float
    spl: float
    sae: float
    n_episodes: int
    per_target: dict
    long: dict | None  # same keys restricted to optimal_len >= LONG_PATH_MIN; None if that subset is empty

    @classmethod
    def from_records(cls, records: Sequence[EpisodeRecord]) -> "MetricsReport":
        base = summarize(records)
        per_target = {}
        for t in sorted({r.target for r in records}):
            per_target[int(t)] = summarize([r for r in records if r.target == t])
        long_recs = [r for r in records if r.optimal_len >= LONG_PATH_MIN]
        return cls(base["sr"], base["spl"], base["sae"], len(records), per_target,
                   summarize(long_recs) if long_recs else None)

    def to_dict(self) -> dict:
        return asdict(self)


# -- attention bias -----------------------------------------------------------------------
def attention_distribution(records: Sequence[EpisodeRecord]) -> np.ndarray:
    """Mean raw attention per object over every logged step of every episode."""
    steps = [np.asarray(a, dtype=float) for r in records for a in r.per_step_attention]
    if not steps:
        return np.zeros(0)
    return np.mean(steps, axis=0)


@dataclass
class BiasReport:
    ratio: float
    normalized_entropy: float
    capped: bool  # min entry fell below the floor

    def to_dict(self) -> dict:
        return asdict(self)


def bias_ratio(distribution, eps: float = BIAS_EPS) -> BiasReport:
    d = np.asarray(distribution, dtype=float)
    if d.size == 0 or np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distribution must be finite and non-negative")
    if d.max() <= 0:
        raise ValueError("distribution is all zero")
    lo = d.min()
    ratio = d.max() / max(lo, eps)
    p = d / d.sum()
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    norm = h / math.log(d.size) if d.size > 1 else 1.0
    return BiasReport(float(ratio), norm, bool(lo < eps))


# -- kNN entropy ----------------------------------------------------------------------------
def knn_entropy(samples, k: int = 3) -> float:
    """Kozachenko-Leonenko differential entropy estimate in nats."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if k < 1 or n <= k:
        raise ValueError(f"need n > k >= 1, got n={n}, k={k}")
    if np.all(x == x[0]):
        raise ValueError("degenerate sample: all points identical")
    _, first = np.unique(x, axis=0, return_index=True)
    if len(first) < n:
        dup = np.ones(n, bool)
        dup[first] = False
        x = x.copy()
        x[dup] += 1e-12 * np.random.default_rng(0).standard_normal((int(dup.sum()), d))
    dist, _ = cKDTree(x).query(x, k=k + 1)
    r = dist[:, k]
    log_unit_ball = (d / 2) * math.log(math.pi) - gammaln(d / 2 + 1)
    return float(digamma(n) - digamma(k) + log_unit_ball + d * np.mean(np.log(r)))


# -- graph export ----------------------------------------------------------------------------
def write_matrix_csv(matrix, path, header: Sequence[str] | None = None) -> None:
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header if header is not None else [f"c{j}" for j in range(m.shape[1])])
        for row in m:
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows])


def export_graphs(params, path, gv_samples=None) -> dict:
    """Write the row-normalised intrinsic graph (row = target) and optional sampled G_v vectors."""
    from .model import normalized_intrinsic

    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    gn = normalized_intrinsic(params["gn"], params.cfg.undirected_doa).data
    n = gn.shape[0]
    files = {"gn_matrix": out / "gn_matrix.csv"}
    write_matrix_csv(gn, files["gn_matrix"], [f"obj{q}" for q in range(n)])
    if gv_samples is not None and len(gv_samples):
        files["gv_samples"] = out / "gv_samples.csv"
        write_matrix_csv(np.asarray(gv_samples), files["gv_samples"], [f"obj{q}" for q in range(n)])
    return files
